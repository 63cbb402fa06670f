"""Saliency maps, coupling histograms, and capsule exports."""

import numpy as np
import pytest

from capsdet import analysis as AN
from capsdet import model as M
from capsdet.features import EmbeddingDataset, ImageBuffer, freq_embed


def probe_image(rng, h=16, w=16):
    return ImageBuffer.from_array(rng.uniform(0.2, 0.8, size=(h, w, 3)))


def confidence(img, record, model):
    """Scalar the saliency map differentiates: the winning capsule norm
    recomputed from a fresh frequency embedding."""
    rec2 = type(record)(
        record.id, record.label, record.visual, record.text,
        freq_embed(img).astype(np.float32),
    )
    caps, _ = M.forward(rec2, model)
    norms = np.linalg.norm(caps.data, axis=1)
    return float(norms.max())


# --------------------------------------------------------------- saliency


def test_saliency_shape_and_nonnegative(trained, synth_test, rng):
    model, _, _ = trained
    rec = list(synth_test)[0]
    img = probe_image(rng)
    smap = AN.saliency(img, rec, model)
    assert smap.values.shape == (16, 16)
    assert np.all(smap.values >= 0.0)
    assert smap.predicted_label in (0, 1)
    assert 0.0 <= smap.confidence < 1.0


def test_saliency_normalized_range(trained, synth_test, rng):
    model, _, _ = trained
    smap = AN.saliency(probe_image(rng), list(synth_test)[0], model)
    normed = smap.normalized()
    assert normed.min() == pytest.approx(0.0)
    assert normed.max() == pytest.approx(1.0)


def test_saliency_probe_fd_effect(trained, synth_test):
    """Nudging the max-saliency pixel moves the confidence more than
    nudging a low-saliency pixel (smaller twin of the 50-trial acceptance
    probe)."""
    model, _, _ = trained
    rec = list(synth_test)[0]
    wins = 0
    h = 1e-3
    trials = 15
    for trial in range(trials):
        rng = np.random.default_rng(1000 + trial)
        img = probe_image(rng)
        smap = AN.saliency(img, rec, model)
        flat = smap.values.ravel()
        hi = int(np.argmax(flat))
        order = np.argsort(flat)
        lo = int(rng.choice(order[: len(order) // 4]))  # random low-saliency pixel
        if flat[hi] <= flat[lo]:
            continue

        def fd(pix):
            y, x = divmod(pix, smap.values.shape[1])
            deltas = []
            for ch in range(3):
                bumped = img.pixels.copy()
                bumped[y, x, ch] += h
                up = confidence(ImageBuffer.from_array(bumped), rec, model)
                bumped[y, x, ch] -= 2 * h
                down = confidence(ImageBuffer.from_array(bumped), rec, model)
                deltas.append(abs(up - down) / (2 * h))
            return float(np.mean(deltas))

        if fd(hi) > fd(lo):
            wins += 1
    assert wins >= int(0.9 * trials)


def test_saliency_outputs(tmp_path, trained, synth_test, rng):
    import struct

    model, _, _ = trained
    smap = AN.saliency(probe_image(rng), list(synth_test)[0], model)
    pgm = tmp_path / "s.pgm"
    AN.save_saliency_pgm(smap, pgm)
    assert pgm.read_bytes().startswith(b"P5")
    raw = tmp_path / "s.raw"
    AN.save_saliency_raw(smap, raw)
    blob = raw.read_bytes()
    hh, ww = struct.unpack_from("<II", blob, 0)
    assert (hh, ww) == smap.values.shape
    vals = np.frombuffer(blob[8:], dtype="<f4").reshape(hh, ww)
    assert np.allclose(vals, smap.values.astype(np.float32))


# ------------------------------------------------------------- histograms


def test_final_couplings_sum_and_length(trained, synth_test):
    model, _, _ = trained
    coeffs, pred = AN.final_couplings(list(synth_test)[0], model)
    assert coeffs.shape == (192,)
    assert pred in (0, 1)
    assert np.all(coeffs > 0.0) and np.all(coeffs < 1.0)


def test_routing_histogram_count_conservation(trained, synth_test):
    model, _, _ = trained
    subset = EmbeddingDataset(list(synth_test)[:5])
    hists = AN.routing_histogram(subset, model, bins=10)
    assert set(hists) == {"visual", "text", "frequency"}
    edges_ref = None
    for counts, edges in hists.values():
        assert counts.sum() == 64 * len(subset)  # every coefficient lands in a bin
        if edges_ref is None:
            edges_ref = edges
        assert np.array_equal(edges, edges_ref)  # shared edges


def test_histogram_csv_shape(trained, synth_test):
    model, _, _ = trained
    subset = EmbeddingDataset(list(synth_test)[:2])
    hists = AN.routing_histogram(subset, model, bins=5)
    lines = AN.histogram_csv(hists).strip().split("\n")
    assert lines[0] == "modality,bin_lo,bin_hi,count"
    assert len(lines) == 1 + 3 * 5


def test_routing_histogram_rejects_bad_bins(trained, synth_test):
    from capsdet.errors import ContractError

    model, _, _ = trained
    with pytest.raises(ContractError):
        AN.routing_histogram(synth_test, model, bins=0)


# ----------------------------------------------------------------- export


def test_export_capsules_round_trip_f32(trained, synth_test):
    model, _, _ = trained
    subset = EmbeddingDataset(list(synth_test)[:2])
    text = AN.export_capsules(subset, model)
    rows = AN.parse_capsule_export(text)
    # per record: 192 capsules x 2 classes of votes + R iterations x 2 classes
    per_record = 192 * 2 + model.config.routing_iters * 2
    assert len(rows) == per_record * len(subset)
    _, trace = M.forward(list(subset)[0], model)
    vote_rows = [r for r in rows if r[0] == list(subset)[0].id and r[1] == -1]
    for ident, _, i, k, vec in vote_rows[:10]:
        assert np.array_equal(vec, trace.votes[i, k].astype(np.float32))
    cap_rows = [r for r in rows if r[0] == list(subset)[0].id and r[1] >= 0]
    for ident, r, _, k, vec in cap_rows:
        assert np.array_equal(vec, trace.class_caps[r][k].astype(np.float32))
