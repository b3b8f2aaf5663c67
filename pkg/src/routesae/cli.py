"""Command-line entry point. Exit codes: 0 success, 1 usage error, 2 data or contract error."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import evalsuite, interp_client, synthbench, toy_lm, trainer
from .activation_store import NormalizationStats, RecordBatch, compute_norm_stats, load_shard
from .errors import DataError

log = logging.getLogger("routesae")

COMMANDS = (
    "gen-synth", "harvest", "norm-stats", "train", "eval-mse", "eval-kl", "extract-contexts",
    "count-features", "interp-prompts", "interp-score", "steer", "export-frontier",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="INI run file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help="override every seed in the run")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="routesae", description="Routed sparse autoencoder toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write a planted-dictionary shard and ground truth")
    _common(p)
    p.add_argument("--n", type=int, help="training tokens (default from [synth_data])")
    p.add_argument("--n-eval", type=int, help="held-out tokens written to eval.rsae")

    p = sub.add_parser("harvest", help="run the toy LM and write activation shards")
    _common(p)
    p.add_argument("--model", help="toy LM weights; created from [toylm] if omitted")
    p.add_argument("--tokens", help="raw byte file to split into sequences (default: synthetic stream)")
    p.add_argument("--layers", help="comma-separated layer ids")

    p = sub.add_parser("norm-stats", help="per-layer normalization scales")
    _common(p)
    p.add_argument("shards", nargs="+")
    p.add_argument("--max-tokens", type=int)

    p = sub.add_parser("train", help="train one architecture")
    _common(p)
    p.add_argument("shards", nargs="+")
    p.add_argument("--arch")
    p.add_argument("--k", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--norm", help="normalization stats JSON (default: computed from the shards)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval-mse", help="normalized MSE and L0 on shards")
    _common(p, out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("shards", nargs="+")

    p = sub.add_parser("eval-kl", help="downstream KL frontier through the toy LM")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--tokens")
    p.add_argument("--label", default="")

    p = sub.add_parser("extract-contexts", help="threshold contexts into feature dossiers")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("shards", nargs="+")
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--window", type=int)

    p = sub.add_parser("count-features", help="retained-feature counts across thresholds")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("shards", nargs="+")
    p.add_argument("--threshold", action="append", type=float, help="repeatable; default from [eval]")

    p = sub.add_parser("interp-prompts", help="render judge prompts for retained dossiers")
    _common(p)
    p.add_argument("--dossiers", required=True)

    p = sub.add_parser("interp-score", help="score sampled features by judge responses")
    _common(p)
    p.add_argument("--dossiers", required=True)
    p.add_argument("--offline", action="store_true", help="replay canned responses instead of calling the endpoint")
    p.add_argument("--responses", help="directory of <feature_id>.txt responses")

    p = sub.add_parser("steer", help="clamp one latent and continue greedily")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--feature", type=int)
    p.add_argument("--clamp", type=float)
    p.add_argument("--horizon", type=int)
    p.add_argument("--prompt")

    p = sub.add_parser("export-frontier", help="merge results into plot-ready CSV tables")
    _common(p)
    p.add_argument("--frontier", nargs="*", default=[], help="eval-kl frontier CSVs")
    p.add_argument("--counts", nargs="*", default=[], help="count-features CSVs")
    p.add_argument("--metrics", nargs="*", default=[], help="training metrics for training-time routing")
    p.add_argument("--checkpoint", help="route checkpoint for inference-time routing")
    p.add_argument("--shards", nargs="*", default=[])
    return parser


def _resolve(args) -> cfgmod.RunConfig:
    overrides: dict[str, dict[str, str]] = {}
    for item in args.set:
        section, key, value = cfgmod.parse_override(item)
        overrides.setdefault(section, {})[key] = value
    cfg = cfgmod.load_config(args.config, overrides)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args) -> Path | None:
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _artifact(path: str) -> evalsuite.Artifact:
    return evalsuite.Artifact.from_checkpoint(trainer.load_checkpoint(path))


def _load_batches(shards) -> RecordBatch:
    batches = [load_shard(s)[1] for s in shards]
    return RecordBatch.concat(batches)


def _token_sequences(cfg: cfgmod.RunConfig, tokens_path: str | None, n_seqs: int, seed: int):
    if tokens_path:
        return toy_lm.load_token_file(tokens_path, cfg.toylm_data.seq_len)
    return toy_lm.synthetic_token_stream(n_seqs, cfg.toylm_data.seq_len, seed)


def cmd_gen_synth(args, cfg, argv):
    out = _out(args)
    n = args.n or cfg.synth_data.n_tokens
    n_eval = cfg.synth_data.n_eval_tokens if args.n_eval is None else args.n_eval
    paths = synthbench.write_synthetic(cfg.synth, n, out, "train")
    if n_eval:
        # held-out tokens continue the same stream after the training range
        synthbench.write_synthetic(cfg.synth, n_eval, out, "eval", start=n)
    cfgmod.write_echo(cfg, out, argv)
    print(f"wrote {paths['shard']} ({n} tokens)" + (f" and eval.rsae ({n_eval} tokens)" if n_eval else ""))


def cmd_harvest(args, cfg, argv):
    out = _out(args)
    if args.model:
        lm = toy_lm.load_toy_lm(args.model)
    else:
        lm = toy_lm.init_toy_lm(cfg.toylm)
        toy_lm.save_toy_lm(lm, out / "toy_lm.rste")
    layers_text = args.layers or cfg.toylm_data.layers
    layers = cfg.int_list(layers_text) if layers_text else list(toy_lm.routing_range(lm.config.n_layers))
    seed = cfg.run.seed
    train_seqs = _token_sequences(cfg, args.tokens, cfg.toylm_data.n_seqs, seed)
    header = toy_lm.harvest(lm, train_seqs, layers, out / "train.rsae", "toy-lm:train")
    if cfg.toylm_data.n_eval_seqs and not args.tokens:
        eval_seqs = toy_lm.synthetic_token_stream(cfg.toylm_data.n_eval_seqs, cfg.toylm_data.seq_len, seed + 1)
        toy_lm.harvest(lm, eval_seqs, layers, out / "eval.rsae", "toy-lm:eval")
    cfgmod.write_echo(cfg, out, argv)
    print(f"harvested {header.n_tokens} tokens at layers {list(header.layer_ids)}")


def cmd_norm_stats(args, cfg, argv):
    out = _out(args)
    stats = compute_norm_stats(args.shards, args.max_tokens or cfg.eval.norm_tokens)
    (out / "norm_stats.json").write_text(json.dumps(stats.to_dict(), indent=2) + "\n")
    cfgmod.write_echo(cfg, out, argv)
    print(" ".join(f"{s:.6g}" for s in stats.per_layer_scale))


def cmd_train(args, cfg, argv):
    out = _out(args)
    tc = cfg.train
    updates = {"architecture": args.arch, "k": args.k, "M": args.M, "total_steps": args.steps}
    tc = replace(tc, **{k: v for k, v in updates.items() if v is not None})
    cfg = replace(cfg, train=tc)
    norm = None
    if args.norm:
        norm = NormalizationStats.from_dict(json.loads(Path(args.norm).read_text()))
    else:
        norm = compute_norm_stats(args.shards, cfg.eval.norm_tokens)
    resume = trainer.load_checkpoint(args.resume) if args.resume else None
    ckpt, rows = trainer.train(tc, args.shards, norm, resume=resume)
    trainer.save_checkpoint(ckpt, out / "checkpoint.rste")
    trainer.write_metrics(rows, out / "metrics.tsv")
    cfgmod.write_echo(cfg, out, argv)
    last = rows[-1] if rows else None
    print(f"trained {tc.architecture} k={tc.k} for {ckpt.step} steps"
          + (f", final loss {last.loss:.6g}, L0 {last.l0:g}" if last else ""))


def cmd_eval_mse(args, cfg, argv):
    art = _artifact(args.checkpoint)
    batch = _load_batches(args.shards)
    rec = art.reconstruct(batch.x)
    nmse = evalsuite.normalized_mse(rec.x_in, rec.x_hat)
    l0 = float(rec.active.sum(axis=1).mean())
    print(f"nmse={nmse:.9g} mean_l0={l0:g} tokens={len(batch)}")
    out = _out(args)
    if out is not None:
        with open(out / "mse.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["architecture", "k", "nmse", "mean_l0", "n_tokens"])
            w.writerow([art.arch, art.model.params.k, f"{nmse:.9g}", f"{l0:g}", len(batch)])
        cfgmod.write_echo(cfg, out, argv)


def cmd_eval_kl(args, cfg, argv):
    out = _out(args)
    lm = toy_lm.load_toy_lm(args.model)
    seqs = _token_sequences(cfg, args.tokens, cfg.toylm_data.n_eval_seqs, cfg.run.seed + 1)
    by_arch: dict[str, dict[int, evalsuite.Artifact | None]] = {}
    for path in args.checkpoints:
        if not Path(path).exists():
            log.warning("checkpoint %s missing, skipping", path)
            continue
        ckpt = trainer.load_checkpoint(path)
        if ckpt.arch == "crosscoder":
            log.warning("%s: crosscoder has no single substitution layer, skipping", path)
            continue
        group = by_arch.setdefault(ckpt.arch, {})
        if ckpt.config.k in group:
            raise UsageError(f"two {ckpt.arch} checkpoints with k={ckpt.config.k}")
        group[ckpt.config.k] = evalsuite.Artifact.from_checkpoint(ckpt)
    rows = []
    for arch in sorted(by_arch):
        rows += evalsuite.kl_frontier(lm, by_arch[arch], seqs, args.label or arch)
    evalsuite.write_frontier_csv(rows, out / "frontier.csv")
    cfgmod.write_echo(cfg, out, argv)
    for r in rows:
        print(f"{r.label} k={r.k} mean_l0={r.mean_l0:g} mean_kl={r.mean_kl:.6g} nmse={r.nmse:.6g}")


def cmd_extract(args, cfg, argv):
    out = _out(args)
    art = _artifact(args.checkpoint)
    dossiers = evalsuite.extract_contexts(art, _load_batches(args.shards), args.threshold,
                                          args.window or cfg.eval.window)
    n = evalsuite.write_dossiers(dossiers, out / "dossiers.jsonl")
    cfgmod.write_echo(cfg, out, argv)
    print(f"{len(dossiers)} features fired above {args.threshold}; {n} retained")


def cmd_count(args, cfg, argv):
    out = _out(args)
    thresholds = sorted(args.threshold or cfg.float_list(cfg.eval.thresholds))
    art = _artifact(args.checkpoint)
    dossiers = evalsuite.extract_contexts(art, _load_batches(args.shards), thresholds[0], cfg.eval.window)
    counts = evalsuite.count_interpretable(dossiers, thresholds, built_at=thresholds[0])
    with open(out / "feature_counts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["architecture", "k", "threshold", "retained_features"])
        for t, n in counts:
            w.writerow([art.arch, art.model.params.k, t, n])
            print(f"threshold={t:g} retained={n}")
    cfgmod.write_echo(cfg, out, argv)


def cmd_interp_prompts(args, cfg, argv):
    out = _out(args)
    paths = interp_client.write_prompts(evalsuite.read_dossiers(args.dossiers), out)
    cfgmod.write_echo(cfg, out, argv)
    print(f"wrote {len(paths)} prompts")


def cmd_interp_score(args, cfg, argv):
    out = _out(args)
    dossiers = evalsuite.read_dossiers(args.dossiers)
    ic = cfg.interp
    if args.offline:
        directory = args.responses or ic.responses_dir
        if not directory:
            raise UsageError("--offline needs --responses DIR or [interp] responses_dir")
        respond = interp_client.canned_responder(directory)
        concurrency = 1
    else:
        endpoint = interp_client.EndpointConfig.from_env(retries=ic.retries, concurrency=ic.concurrency,
                                                         audit_log=str(out / "audit.jsonl"))
        if not endpoint.base_url:
            raise DataError(f"no endpoint configured; set {interp_client.ENV_BASE_URL} or use --offline")
        respond = interp_client.endpoint_responder(endpoint)
        concurrency = ic.concurrency
    report = interp_client.score_features(dossiers, respond, ic.sample_size, cfg.run.seed,
                                          retries=ic.retries, backoff=0.0 if args.offline else 1.0,
                                          concurrency=concurrency)
    report.write(out / "interp_report.csv")
    cfgmod.write_echo(cfg, out, argv)
    print(report.summary_line())


def cmd_steer(args, cfg, argv):
    out = _out(args)
    sc = cfg.steer
    lm = toy_lm.load_toy_lm(args.model)
    art = _artifact(args.checkpoint)
    updates = {"prompt": args.prompt, "feature_id": args.feature, "clamp_value": args.clamp, "horizon": args.horizon}
    sc = replace(sc, **{k: v for k, v in updates.items() if v is not None})
    cfg = replace(cfg, steer=sc)
    prompt, feature, clamp, horizon = sc.prompt.encode("latin-1"), sc.feature_id, sc.clamp_value, sc.horizon
    tokens = list(prompt)
    res = evalsuite.steer(lm, art, tokens, feature, clamp, horizon)
    control = evalsuite.steer(lm, art, tokens, feature, None, horizon)
    (out / "before.txt").write_text(evalsuite.decode_bytes(res.original) + "\n")
    (out / "after.txt").write_text(evalsuite.decode_bytes(res.clamped) + "\n")
    with open(out / "logit_deltas.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["position", "clamped_delta", "control_delta"])
        for i, (a, b) in enumerate(zip(res.logit_delta, control.logit_delta)):
            w.writerow([i, f"{a:.9g}", f"{b:.9g}"])
    cfgmod.write_echo(cfg, out, argv)
    print(f"feature {feature} clamp {clamp}: mean |dlogit| {res.mean_abs_delta:.6g} "
          f"(substitution only {control.mean_abs_delta:.6g})")


def cmd_export(args, cfg, argv):
    out = _out(args)
    written = []
    if args.frontier:
        rows = []
        for path in args.frontier:
            with open(path, newline="") as fh:
                rows.extend(csv.DictReader(fh))
        with open(out / "fig_kl_frontier.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["architecture", "k", "mean_l0", "mean_kl", "nmse", "n_tokens"])
            w.writeheader()
            w.writerows(sorted(rows, key=lambda r: (r["architecture"], int(r["k"]))))
        written.append("fig_kl_frontier.csv")
    if args.counts:
        rows = []
        for path in args.counts:
            with open(path, newline="") as fh:
                rows.extend(csv.DictReader(fh))
        with open(out / "fig_feature_counts.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["architecture", "k", "threshold", "retained_features"])
            w.writeheader()
            w.writerows(rows)
        written.append("fig_feature_counts.csv")
    hist_rows = []
    for path in args.metrics:
        hists = [np.array(r.routing) for r in trainer.read_metrics(path) if r.routing is not None]
        if hists:
            hist_rows.append(("training", path, np.mean(hists, axis=0)))
    if args.checkpoint:
        if not args.shards:
            raise UsageError("--checkpoint needs --shards for inference-time routing")
        art = _artifact(args.checkpoint)
        rec = art.reconstruct(_load_batches(args.shards).x)
        hist_rows.append(("inference", args.checkpoint, evalsuite.routing_histogram(rec.layer, len(art.layer_ids))))
    if hist_rows:
        with open(out / "fig_routing_hist.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phase", "source", "layer_index", "fraction"])
            for phase, src, hist in hist_rows:
                for i, frac in enumerate(hist):
                    w.writerow([phase, src, i, f"{frac:.9g}"])
        written.append("fig_routing_hist.csv")
    if not written:
        raise UsageError("nothing to export; pass --frontier, --counts, --metrics or --checkpoint")
    cfgmod.write_echo(cfg, out, argv)
    print("wrote " + ", ".join(written))


HANDLERS = {
    "gen-synth": cmd_gen_synth, "harvest": cmd_harvest, "norm-stats": cmd_norm_stats, "train": cmd_train,
    "eval-mse": cmd_eval_mse, "eval-kl": cmd_eval_kl, "extract-contexts": cmd_extract,
    "count-features": cmd_count, "interp-prompts": cmd_interp_prompts, "interp-score": cmd_interp_score,
    "steer": cmd_steer, "export-frontier": cmd_export,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        cfg = _resolve(args)
        HANDLERS[args.command](args, cfg, ["routesae"] + argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
