import json
import numpy as np
import pytest

import brain3d


def test_volume_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    vol = rng.random((4, 6, 8), dtype=np.float32)
    path = tmp_path / "v.bvol"
    brain3d.write_volume(vol, path)
    back = brain3d.read_volume(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, vol)


def test_bad_volume_file(tmp_path):
    path = tmp_path / "bad.bvol"
    path.write_bytes(b"nope")
    with pytest.raises(brain3d.FormatError):
        brain3d.read_volume(path)


def test_preprocess_and_resample():
    rng = np.random.default_rng(1)
    vol = rng.random((8, 8, 8), dtype=np.float32) * 100
    out = brain3d.preprocess_volume(vol, dims=(4, 4, 4))
    assert out.shape == (4, 4, 4)
    assert out.min() >= 0.0 and out.max() <= 1.0
    const = np.full((3, 3, 3), 2.5, dtype=np.float32)
    assert np.allclose(brain3d.resample_trilinear(const, (5, 4, 2)), 2.5)


def test_generated_subject():
    s = brain3d.generate_subject(7, "pathological", "left", dims=(16, 32, 32))
    assert s["volume"].shape == (16, 32, 32)
    assert s["findings"]["laterality"] == {"left"}
    assert brain3d.extract_findings(s["report"]) == s["findings"]
    healthy = brain3d.generate_subject(7, "healthy", "none")
    assert not any(healthy["findings"].values())


def test_compression_and_infonce():
    z = np.arange(12, dtype=np.float64).reshape(6, 2)
    pooled = brain3d.compress_tokens(z, 3)
    assert np.allclose(pooled, [[1, 2], [5, 6], [9, 10]])
    eye = np.eye(2)
    assert brain3d.infonce(eye, eye, 1.0) == pytest.approx(0.3133, abs=1e-4)
    with pytest.raises(brain3d.DomainError):
        brain3d.infonce(np.eye(1, 3), np.eye(1, 3), 1.0)


def test_top_p():
    assert brain3d.top_p_filter([0.5, 0.3, 0.2], 0.7) == pytest.approx([0.625, 0.375, 0.0])


def test_metrics():
    ref = "edema in the left frontal lobe"
    assert brain3d.bleu(ref, [ref], 4) == pytest.approx(1.0)
    assert brain3d.rouge_l("a b c", "a c") == pytest.approx(0.8)
    other = "necrosis with edema in the right temporal lobe"
    assert brain3d.cider([ref, other], [[ref], [other]]) == pytest.approx([10.0, 10.0])
    assert brain3d.cider([ref], [[ref]]) == [0.0]
    report = brain3d.evaluate_reports([ref, "no abnormality detected."], [ref, "normal brain mri."], n_boot=50)
    assert report["clinical_laterality_f1"]["mean"] == 1.0
    assert report["healthy_specificity"]["mean"] == 1.0
    low, high = brain3d.bootstrap_ci([0.0] * 250 + [1.0] * 250, n_boot=1000, seed=0)
    assert low == pytest.approx(0.456, abs=0.01) and high == pytest.approx(0.544, abs=0.01)


def test_lime_planted():
    beta = [1.5, -2.0, 0.3, 0.0]
    fit = brain3d.lime_fit(4, lambda z: 0.5 + sum(b * x for b, x in zip(beta, z)), ridge=1e-9, kernel_width=1.0)
    assert fit["weights"] == pytest.approx(beta, abs=1e-5)
    assert fit["r2"] == pytest.approx(1.0)


def test_default_config_values():
    cfg = brain3d.default_config()
    assert cfg["decode"]["temperature"] == 0.1
    assert cfg["decode"]["top_p"] == 0.9
    assert cfg["decode"]["repetition_penalty"] == 1.2
    assert cfg["data"]["n_pathological"] == 369
    assert cfg["data"]["n_healthy"] == 99
    assert cfg["train"]["phase1"]["effective_batch"] == 128


def _tiny_config(path):
    cfg = {
        "seed": 3,
        "data": {"n_pathological": 6, "n_healthy": 2, "volume_dims": [8, 8, 8]},
        "model": {
            "volume_dims": [8, 8, 8],
            "patch": [4, 4, 4],
            "d_v": 8,
            "encoder_layers": 1,
            "encoder_heads": 2,
            "K": 4,
            "d_llm": 8,
            "lm_layers": 1,
            "lm_heads": 2,
            "max_positions": 128,
            "lora_rank": 2,
            "lora_alpha": 4.0,
        },
        "lm_pretrain": {"steps": 2, "batch": 2},
        "train": {
            phase: {"total_steps": 2, "warmup_steps": 1, "effective_batch": 2, "micro_batch": 1}
            for phase in ("phase1", "phase2a", "phase2b")
        },
        "eval": {"n_boot": 20},
        "interpret": {"n_supervoxels": 3, "n_samples": 8},
    }
    path.write_text(json.dumps(cfg))
    return path


def test_pipeline_commands(tmp_path):
    cfg = _tiny_config(tmp_path / "cfg.json")
    out = tmp_path / "exp"
    brain3d.synth(out, config=cfg)
    with pytest.raises(brain3d.ProvenanceError):
        brain3d.train("2b", out, config=cfg)
    for phase in ("1", "2a", "2b"):
        brain3d.train(phase, out, config=cfg)
    preds = brain3d.generate(out, "test", config=cfg)
    report = brain3d.evaluate(out, preds, config=cfg)
    assert 0.0 <= report["bleu1"]["mean"] <= 1.0
    subject = json.loads(preds.read_text().splitlines()[0])["subject_id"]
    heat = brain3d.explain(out, subject, config=cfg)
    assert brain3d.read_volume(heat).shape == (8, 8, 8)
    with pytest.raises(brain3d.ConfigError):
        brain3d.synth(out, config=tmp_path / "missing.json")
