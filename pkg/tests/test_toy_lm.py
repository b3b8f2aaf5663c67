import numpy as np
import pytest

from routesae import toy_lm
from routesae.activation_store import load_shard
from routesae.errors import DataError
from routesae.toy_lm import PatchPlan, ToyLmConfig


@pytest.fixture(scope="module")
def lm():
    return toy_lm.init_toy_lm(ToyLmConfig(n_layers=6, max_seq=32))


TOKENS = np.array([104, 101, 108, 108, 111, 32, 119, 111])


def test_forward_is_deterministic(lm):
    a, ra = toy_lm.lm_forward(lm, TOKENS)
    b, rb = toy_lm.lm_forward(lm, TOKENS)
    assert a.tobytes() == b.tobytes() and ra.tobytes() == rb.tobytes()
    assert a.shape == (8, 256) and ra.shape == (6, 8, 32)


def test_length_one(lm):
    logits, _, att = toy_lm.lm_forward(lm, [65], debug=True)
    assert np.all(np.isfinite(logits))
    assert all(np.allclose(a, 1.0) for a in att)


def test_attention_rows_sum_to_one_and_are_causal(lm):
    _, _, att = toy_lm.lm_forward(lm, TOKENS, debug=True)
    for a in att:
        assert np.allclose(a.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(np.triu(a[0], 1) == 0)


def test_causality(lm):
    a, _ = toy_lm.lm_forward(lm, TOKENS)
    changed = TOKENS.copy()
    changed[-1] = 1
    b, _ = toy_lm.lm_forward(lm, changed)
    assert np.allclose(a[:-1], b[:-1], atol=1e-12)


def test_input_validation(lm):
    with pytest.raises(DataError):
        toy_lm.lm_forward(lm, np.zeros(33, dtype=int))
    with pytest.raises(DataError):
        toy_lm.lm_forward(lm, [256])


def test_empty_plan_is_bit_exact(lm):
    logits, _ = toy_lm.lm_forward(lm, TOKENS)
    assert toy_lm.patched_forward(lm, TOKENS, PatchPlan({})).tobytes() == logits.tobytes()


def test_identity_patch(lm):
    logits, resid = toy_lm.lm_forward(lm, TOKENS)
    T = len(TOKENS)
    layers = np.arange(T) % 6
    plan = PatchPlan.from_arrays(range(T), layers, resid[layers, np.arange(T)])
    assert np.allclose(toy_lm.patched_forward(lm, TOKENS, plan), logits, atol=1e-6)


def test_zeroing_final_layer_equals_head_on_zeros(lm):
    T = len(TOKENS)
    plan = PatchPlan.from_arrays(range(T), [5] * T, np.zeros((T, 32)))
    expected = toy_lm.lm_head(lm, np.zeros((T, 32)))
    assert np.allclose(toy_lm.patched_forward(lm, TOKENS, plan), expected, atol=1e-12)


def test_patch_changes_only_later_positions_and_layers(lm):
    logits, resid = toy_lm.lm_forward(lm, TOKENS)
    plan = PatchPlan.from_arrays([4], [2], [resid[2, 4] + np.linspace(-1, 1, 32)])
    out = toy_lm.patched_forward(lm, TOKENS, plan)
    assert np.array_equal(out[:4], logits[:4])
    assert not np.allclose(out[4], logits[4])


def test_invalid_plans_are_listed(lm):
    with pytest.raises(DataError, match=r"\(9, 0\)"):
        toy_lm.patched_forward(lm, TOKENS, PatchPlan({(9, 0): np.zeros(32), (0, 0): np.zeros(32)}))
    with pytest.raises(DataError, match="duplicate"):
        PatchPlan.from_arrays([0, 0], [1, 1], np.zeros((2, 32)))


def test_harvest_counts_and_values(lm, tmp_path):
    seqs = [TOKENS, TOKENS[::-1].copy()]
    header = toy_lm.harvest(lm, seqs, [1, 2, 4], tmp_path / "h.rsae")
    assert header.n_tokens == 16 and header.L == 3 and header.layer_ids == (1, 2, 4)
    _, batch = load_shard(tmp_path / "h.rsae")
    _, resid = toy_lm.lm_forward(lm, seqs[1])
    row = np.flatnonzero((batch.sequence_id == 1) & (batch.position == 3))[0]
    assert batch.x[row].tobytes() == resid[[1, 2, 4], 3].astype(np.float32).tobytes()
    assert batch.token_id[row] == seqs[1][3]
    with pytest.raises(DataError):
        toy_lm.harvest(lm, seqs, [6], tmp_path / "bad.rsae")


def test_routing_range_helper():
    assert toy_lm.routing_range(16) == list(range(4, 12))
    assert toy_lm.baseline_layer(16) == 11
    assert toy_lm.routing_range(8) == [2, 3, 4, 5]


def test_save_load_roundtrip(lm, tmp_path):
    toy_lm.save_toy_lm(lm, tmp_path / "lm.rste")
    back = toy_lm.load_toy_lm(tmp_path / "lm.rste")
    assert back.config == lm.config
    assert toy_lm.lm_forward(back, TOKENS)[0].tobytes() == toy_lm.lm_forward(lm, TOKENS)[0].tobytes()


def test_planted_embedding_rows_are_atom_combinations():
    cfg = ToyLmConfig(n_layers=2, planted_atoms=16, atoms_per_token=2)
    emb, atoms, ids = toy_lm.planted_embedding(cfg)
    assert np.allclose(np.linalg.norm(atoms, axis=1), 1)
    assert np.array_equal(toy_lm.init_toy_lm(cfg).weights["embed"], emb)
    # each embedding lies in the span of its two atoms
    for t in (0, 100, 255):
        A = atoms[ids[t]].T
        coef, *_ = np.linalg.lstsq(A, emb[t], rcond=None)
        assert np.allclose(A @ coef, emb[t], atol=1e-12) and np.all(coef > 0)


def test_token_stream_and_files(tmp_path):
    a = toy_lm.synthetic_token_stream(3, 20, seed=1)
    b = toy_lm.synthetic_token_stream(3, 20, seed=1)
    assert all(np.array_equal(x, y) for x, y in zip(a, b)) and len(a[0]) == 20
    (tmp_path / "t.txt").write_bytes(b"hello world, ok")
    seqs = toy_lm.load_token_file(tmp_path / "t.txt", 6)
    assert [len(s) for s in seqs] == [6, 6, 3]
    (tmp_path / "u.bin").write_bytes(b"\x01\x00\x00")
    with pytest.raises(DataError):
        toy_lm.load_token_file(tmp_path / "u.bin", 4, "u32")


def test_greedy_continue_prefix(lm):
    out = toy_lm.greedy_continue(lm, TOKENS[:3], 4)
    assert np.array_equal(out[:3], TOKENS[:3]) and len(out) == 7
    logits, _ = toy_lm.lm_forward(lm, out[:3])
    assert out[3] == np.argmax(logits[-1])


def test_branch_scale_only_touches_residual_writes():
    base = toy_lm.init_toy_lm(ToyLmConfig(n_layers=2))
    small = toy_lm.init_toy_lm(ToyLmConfig(n_layers=2, branch_scale=0.1))
    for name, w in base.weights.items():
        factor = 0.1 if name.endswith(("W_o", "W_out")) else 1.0
        assert np.allclose(small.weights[name], factor * w, rtol=1e-15, atol=0)
