"""Capsule model: encoding, squash, routing against an independent
scalar re-execution, margin loss closed forms, classification, and the
checkpoint format."""

import numpy as np
import pytest

from capsdet import model as M
from capsdet import tensor as T
from capsdet.errors import ContractError, FormatError
from capsdet.features import EmbeddingRecord


def rand_record(rng, label=0):
    return EmbeddingRecord(
        "r",
        label,
        rng.normal(size=768).astype(np.float32),
        rng.normal(size=768).astype(np.float32),
        rng.normal(size=768).astype(np.float32),
    )


@pytest.fixture(scope="module")
def model():
    return M.CapsModel.init(M.ModelConfig(), seed=0)


# ------------------------------------------------------------- encoding


def test_encode_zero_embeddings_give_zero_capsules(model):
    rec = EmbeddingRecord("z", 0, *(np.zeros(768, np.float32),) * 3)
    caps = M.encode_capsules(rec, model)
    assert caps.shape == (192, 8)
    assert not np.any(caps.data)


def test_encode_basis_probe_identity_encoder():
    cfg = M.ModelConfig()
    model = M.CapsModel.init(cfg, seed=0)
    ident = np.zeros((768, 512))
    ident[:512, :512] = np.eye(512)
    for name in M.CapsModel.ENCODER_NAMES:
        model.params[name] = T.tensor(ident.copy(), requires_grad=True)
    e1 = np.zeros(768, np.float32)
    e1[0] = 1.0
    rec = EmbeddingRecord("e", 0, e1, np.zeros(768, np.float32), np.zeros(768, np.float32))
    caps = M.encode_capsules(rec, model)
    expected = np.zeros((192, 8))
    expected[0, 0] = 1.0  # capsule (1,1) of the visual block
    assert np.array_equal(caps.data, expected)


def test_encode_matches_matvec_oracle(model):
    rng = np.random.default_rng(1)
    rec = rand_record(rng)
    caps = M.encode_capsules(rec, model).data
    for b, (vec, enc) in enumerate(
        zip(
            (rec.visual, rec.text, rec.freq),
            (model.params[n].data for n in M.CapsModel.ENCODER_NAMES),
        )
    ):
        oracle = (np.asarray(vec, np.float64) @ enc).reshape(64, 8)
        assert np.max(np.abs(caps[b * 64 : (b + 1) * 64] - oracle)) < 1e-12


def test_modality_mask_zeroes_exactly_that_block(model):
    rng = np.random.default_rng(2)
    rec = rand_record(rng)
    full = M.encode_capsules(rec, model).data
    cfg = M.ModelConfig(modality_mask=("visual", "frequency"))
    masked = M.encode_capsules(rec, model, cfg).data
    assert not np.any(masked[64:128])
    assert np.array_equal(masked[:64], full[:64])
    assert np.array_equal(masked[128:], full[128:])


def test_modality_mask_must_be_valid():
    with pytest.raises(ContractError):
        M.ModelConfig(modality_mask=())
    with pytest.raises(ContractError):
        M.ModelConfig(modality_mask=("visual", "audio"))


# --------------------------------------------------------------- squash


def test_squash_zero_vector():
    assert not np.any(M.squash(np.zeros(5)))


def test_squash_unit_norm():
    v = np.zeros(4)
    v[1] = 1.0
    out = M.squash(v)
    assert np.linalg.norm(out) == pytest.approx(0.5, abs=1e-12)
    assert np.allclose(out / np.linalg.norm(out), v, atol=1e-12)


def test_squash_norm_ten():
    rng = np.random.default_rng(3)
    v = rng.normal(size=6)
    v = 10.0 * v / np.linalg.norm(v)
    out = M.squash(v)
    assert np.linalg.norm(out) == pytest.approx(100 / 101, abs=1e-12)
    assert np.allclose(out / np.linalg.norm(out), v / 10.0, atol=1e-12)


def test_squash_rows_matches_plain_squash():
    rng = np.random.default_rng(4)
    s = rng.normal(size=(3, 5))
    out = T.squash_rows(T.tensor(s)).data
    for i in range(3):
        assert np.allclose(out[i], M.squash(s[i]), atol=1e-15)


# -------------------------------------------------------------- routing


def small_model(rng, n_caps=3, d_i=2, k=2, d_k=2, iters=3):
    cfg = M.ModelConfig(
        d=768, caps_per_modality=n_caps // 3 or 1, caps_dim=d_i,
        num_classes=k, class_caps_dim=d_k, routing_iters=iters,
    )
    params = {
        "route_transforms": T.tensor(rng.normal(size=(n_caps, k, d_i, d_k)),
                                     requires_grad=True),
    }
    model = M.CapsModel(cfg, params)
    return cfg, model


def scalar_routing_oracle(caps, transforms, iters):
    """Independent re-execution of the routing algorithm with explicit
    scalar loops only."""
    n, d_i = caps.shape
    _, k, _, d_k = transforms.shape
    votes = np.zeros((n, k, d_k))
    for i in range(n):
        for kk in range(k):
            for o in range(d_k):
                for d in range(d_i):
                    votes[i, kk, o] += caps[i, d] * transforms[i, kk, d, o]
    logits = np.zeros((n, k))
    v = np.zeros((k, d_k))
    for _ in range(iters):
        alpha = np.zeros((n, k))
        for i in range(n):
            mx = max(logits[i])
            exps = [np.exp(logits[i, kk] - mx) for kk in range(k)]
            z = sum(exps)
            for kk in range(k):
                alpha[i, kk] = exps[kk] / z
        s = np.zeros((k, d_k))
        for kk in range(k):
            for o in range(d_k):
                for i in range(n):
                    s[kk, o] += alpha[i, kk] * votes[i, kk, o]
        for kk in range(k):
            norm = np.sqrt(sum(s[kk, o] ** 2 for o in range(d_k)))
            for o in range(d_k):
                v[kk, o] = 0.0 if norm < 1e-12 else (norm / (1 + norm * norm)) * s[kk, o]
        for i in range(n):
            for kk in range(k):
                logits[i, kk] += sum(votes[i, kk, o] * v[kk, o] for o in range(d_k))
    return v


def test_route_matches_scalar_oracle():
    rng = np.random.default_rng(5)
    cfg, model = small_model(rng, n_caps=3, d_i=2, d_k=2, iters=3)
    caps = rng.normal(size=(3, 2))
    class_caps, _ = M.route(T.tensor(caps), model, cfg)
    oracle = scalar_routing_oracle(caps, model.params["route_transforms"].data, 3)
    assert np.max(np.abs(class_caps.data - oracle)) < 1e-12


def test_route_first_iteration_closed_form():
    rng = np.random.default_rng(6)
    cfg, model = small_model(rng, n_caps=3, d_i=2, d_k=2, iters=1)
    caps = rng.normal(size=(3, 2))
    class_caps, trace = M.route(T.tensor(caps), model, cfg)
    assert np.allclose(trace.couplings[0], 0.5, atol=1e-15)  # zero logits, K=2
    votes = trace.votes
    for k in range(2):
        s = 0.5 * votes[:, k, :].sum(axis=0)
        assert np.allclose(class_caps.data[k], M.squash(s), atol=1e-14)


def test_route_zero_votes_stay_zero():
    rng = np.random.default_rng(7)
    cfg, model = small_model(rng, iters=3)
    class_caps, trace = M.route(T.tensor(np.zeros((3, 2))), model, cfg)
    assert not np.any(class_caps.data)
    for a in trace.logits:
        assert not np.any(a)


def test_routing_invariants_and_bookkeeping(model):
    rng = np.random.default_rng(8)
    for _ in range(10):
        rec = rand_record(rng)
        class_caps, trace = M.forward(rec, model)
        for alpha in trace.couplings:
            assert np.max(np.abs(alpha.sum(axis=1) - 1.0)) < 1e-9
        for v in trace.class_caps:
            norms = np.linalg.norm(v, axis=1)
            assert np.all(norms >= 0) and np.all(norms < 1.0)
        # logit bookkeeping: a_next == a_prev + <votes, v> exactly
        assert len(trace.logits) == model.config.routing_iters + 1
        for r in range(model.config.routing_iters):
            agree = np.einsum("iko,ko->ik", trace.votes, trace.class_caps[r])
            assert np.array_equal(trace.logits[r + 1], trace.logits[r] + agree)


def test_route_shape_contract(model):
    with pytest.raises(ContractError):
        M.route(T.tensor(np.zeros((10, 8))), model)


# ----------------------------------------------------------- margin loss


def caps_with_norms(n0, n1, d_k=4):
    v = np.zeros((2, d_k))
    v[0, 0] = n0
    v[1, 1] = n1
    return T.tensor(v)


def test_margin_loss_zero_when_margins_met():
    loss = M.margin_loss(caps_with_norms(0.9, 0.1), np.array([1.0, 0.0]))
    assert float(loss.data) == pytest.approx(0.0, abs=1e-15)


def test_margin_loss_all_zero_caps():
    loss = M.margin_loss(caps_with_norms(0.0, 0.0), np.array([1.0, 0.0]))
    assert float(loss.data) == pytest.approx(0.81, abs=1e-12)


def test_margin_loss_mixed_closed_form():
    loss = M.margin_loss(caps_with_norms(0.5, 0.6), np.array([1.0, 0.0]))
    assert float(loss.data) == pytest.approx(0.4**2 + 0.5 * 0.5**2, abs=1e-12)


def test_margin_loss_rejects_non_one_hot():
    with pytest.raises(ContractError):
        M.margin_loss(caps_with_norms(0.5, 0.5), np.array([1.0, 1.0]))


def test_margin_config_validation():
    with pytest.raises(ContractError):
        M.MarginLossConfig(pos_margin=0.1, neg_margin=0.9)
    with pytest.raises(ContractError):
        M.MarginLossConfig(neg_weight=0.0)


# --------------------------------------------------------------- classify


def test_classify_clear_winner():
    assert M.classify(caps_with_norms(0.9, 0.1)) == (0, pytest.approx(0.9))
    assert M.classify(caps_with_norms(0.1, 0.9)) == (1, pytest.approx(0.9))


def test_classify_tie_goes_to_real():
    label, conf = M.classify(caps_with_norms(0.4, 0.4))
    assert label == 0 and conf == pytest.approx(0.4)


def test_classify_matches_norm_compare_oracle():
    rng = np.random.default_rng(9)
    for _ in range(50):
        v = rng.normal(size=(2, 8))
        label, conf = M.classify(v)
        norms = np.linalg.norm(v, axis=1)
        assert label == (1 if norms[1] > norms[0] else 0)
        assert conf == pytest.approx(norms[label], abs=1e-12)


def test_classify_scale_invariant_argmax():
    rng = np.random.default_rng(10)
    v = rng.normal(size=(2, 8))
    l1, _ = M.classify(v)
    l2, _ = M.classify(3.7 * v)
    assert l1 == l2


# -------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_bit_exact(tmp_path, model):
    p = tmp_path / "m.cps1"
    M.save_checkpoint(model, p)
    back = M.load_checkpoint(p)
    assert back.config == model.config
    assert sorted(back.params) == sorted(model.params)
    for name in model.params:
        assert np.array_equal(back.params[name].data, model.params[name].data)
    # a second save is byte-identical
    p2 = tmp_path / "m2.cps1"
    M.save_checkpoint(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_checkpoint_preserves_mask_and_flags(tmp_path):
    cfg = M.ModelConfig(modality_mask=("text",), route_grad_through_couplings=False)
    model = M.CapsModel.init(cfg, seed=1)
    p = tmp_path / "m.cps1"
    M.save_checkpoint(model, p)
    back = M.load_checkpoint(p)
    assert back.config.modality_mask == ("text",)
    assert back.config.route_grad_through_couplings is False


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.cps1"
    p.write_bytes(b"XXXX" + b"\x00" * 40)
    with pytest.raises(FormatError, match="magic"):
        M.load_checkpoint(p)


def test_checkpoint_truncated(tmp_path, model):
    p = tmp_path / "t.cps1"
    M.save_checkpoint(model, p)
    p.write_bytes(p.read_bytes()[:-64])
    with pytest.raises(FormatError):
        M.load_checkpoint(p)
