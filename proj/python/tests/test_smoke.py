import math

import numpy as np
import pytest

import volseq


def test_golden_tables_match_model():
    for arch in volseq.architectures():
        assert volseq.parameter_table(arch) == volseq.golden_table(arch)
    rows = volseq.parameter_table("lstm")
    assert rows[1] == ("Conv3D", "(None, 126, 126, 62, 64)", 1792)
    assert sum(r[2] for r in rows) == 2148996


def test_macro_summary_fixture():
    s = volseq.macro_summary([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert s["precision"] == pytest.approx(5 / 6, abs=1e-15)
    assert s["recall"] == pytest.approx(3 / 4, abs=1e-15)
    assert s["accuracy"] == pytest.approx(0.75, abs=1e-15)


def rank_auc(y, s, k):
    pos = s[y == k, k]
    neg = s[y != k, k]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def test_auc_matches_rank_statistic():
    rng = np.random.default_rng(3)
    for _ in range(20):
        y = rng.integers(0, 3, 80)
        y[:3] = [0, 1, 2]
        s = np.round(rng.random((80, 3)) * 10) / 10
        for k in range(3):
            assert abs(volseq.roc_auc(y, s, k) - rank_auc(y, s, k)) <= 1e-12


def test_nifti_round_trip(tmp_path):
    grid = np.arange(60, dtype=float).reshape(5, 4, 3)
    affine = np.array([[0, -1.5, 0, 12.25], [1, 0, 0, -3.5], [0, 0, 2, 40.125], [0, 0, 0, 1]], dtype=float)
    for dt in ["u8", "i16", "f32", "f64"]:
        p = tmp_path / f"v_{dt}.nii.gz"
        volseq.write_nifti(p, grid, (1.5, 1.0, 2.0), affine, dt)
        g, spacing, a = volseq.read_nifti(p)
        np.testing.assert_array_equal(g, grid)
        assert spacing == (1.5, 1.0, 2.0)
        np.testing.assert_array_equal(a, affine)


def test_bad_nifti_raises(tmp_path):
    p = tmp_path / "junk.nii"
    p.write_bytes(b"\0" * 10)
    with pytest.raises(volseq.VolseqError, match="^length error"):
        volseq.read_nifti(p)


def test_nibabel_reads_our_files(tmp_path):
    nib = pytest.importorskip("nibabel")
    rng = np.random.default_rng(1)
    grid = rng.normal(size=(6, 5, 4)).astype(np.float32).astype(float)
    affine = np.array([[0.75, 0, 0, -5], [0, 1.25, 0, 18.5], [0, 0, 2.5, -2.25], [0, 0, 0, 1]], dtype=float)
    p = tmp_path / "v.nii.gz"
    volseq.write_nifti(p, grid, (0.75, 1.25, 2.5), affine, "f32")
    img = nib.load(str(p))
    np.testing.assert_array_equal(np.asarray(img.dataobj, dtype=float), grid)
    np.testing.assert_array_equal(img.affine, affine)
    assert img.header.get_zooms() == pytest.approx((0.75, 1.25, 2.5))

    # And the other way round.
    q = tmp_path / "nib.nii"
    nib.save(nib.Nifti1Image(grid.astype(np.float64), affine), str(q))
    g, spacing, a = volseq.read_nifti(q)
    np.testing.assert_array_equal(g, grid)
    np.testing.assert_array_equal(a, affine)


def test_model_predict_and_checkpoint(tmp_path):
    m = volseq.Model.build("sgru", "reduced", 4)
    rng = np.random.default_rng(0)
    seq = [rng.random(m.input_shape) for _ in range(2)]
    p = m.predict(seq)
    assert p.shape == (4,)
    assert math.isclose(p.sum(), 1.0, abs_tol=1e-12)
    m.save(tmp_path / "m.ckpt")
    back = volseq.Model.load(tmp_path / "m.ckpt")
    assert back.arch == "sgru"
    np.testing.assert_array_equal(back.predict(seq), p)


def test_gradient_check_dense():
    entries = volseq.gradient_check(["dense"])
    assert entries and all(passed for _, _, _, passed in entries)


def test_cli_in_process():
    code, out, _ = volseq.run_cli(["inspect", "--arch", "gru", "--golden"])
    assert code == 0
    assert "matches the reference table" in out
    assert volseq.run_cli(["frobnicate"])[0] == 2
