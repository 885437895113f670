import json
import math
import os

import numpy as np
import pytest

from stme import cli
from stme.checkpoint import load_checkpoint, save_checkpoint
from stme.config import (DataSection, RunConfig, TransformerSection, VqSection,
                         config_from_dict, config_to_dict, load_config)
from stme.metrics import FeatureExtractor
from stme.motion import mpjpe, read_mgrid
from stme.rng import make_rng
from stme.tensor import Tensor
from stme.train import (build_datasets, eval_reconstruction_mpjpe,
                        load_mask_model, load_residual_model, load_vq_model,
                        run_ablation, synth_dataset, tokenize_dataset,
                        train_mask_transformer, train_residual_transformer,
                        train_vqvae)
from stme.vqvae import crop_frames, grid_to_planes, plane_loss_mask, vq_loss_tensors


def tiny_config(**over) -> RunConfig:
    cfg = RunConfig(seed=3)
    cfg.data = DataSection(classes=4, frames=32, joints=4, train_clips=12, eval_clips=4)
    cfg.vqvae = VqSection(codes=16, d_code=8, residual_layers=1, downscale=4,
                          hidden=12, steps=25, batch=4, lr=2e-3, reset_every=10)
    cfg.transformer = TransformerSection(layers=1, heads=2, d_model=16, ffn_mult=2,
                                         d_text=16, steps=20, res_steps=15, batch=4,
                                         lr=1e-3)
    for key, value in over.items():
        setattr(cfg, key, value)
    return cfg


# ---------------------------------------------------------------------------
# config


def test_config_defaults_match_reference_settings():
    cfg = RunConfig()
    assert cfg.vqvae.codes == 256 and cfg.vqvae.d_code == 1024
    assert cfg.vqvae.residual_layers == 5 and cfg.vqvae.downscale == 4
    assert cfg.vqvae.alpha == 1.0 and cfg.vqvae.lr == 2e-4
    assert cfg.transformer.layers == 6 and cfg.transformer.heads == 6
    assert cfg.transformer.d_model == 384 and cfg.transformer.uncond_prob == 0.1
    assert cfg.generation.iterations == 10 and cfg.generation.cfg_scale == 4.0
    assert cfg.eval.repeats == 20 and cfg.eval.diversity_pairs == 300
    assert cfg.data.classes == 4 and cfg.data.frames == 64
    assert cfg.data.train_clips == 512 and cfg.data.eval_clips == 128


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict({"sead": 1})
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict({"vqvae": {"code": 12}})


def test_config_round_trip(tmp_path):
    cfg = tiny_config()
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(config_to_dict(cfg)))
    back = load_config(path)
    assert config_to_dict(back) == config_to_dict(cfg)


# ---------------------------------------------------------------------------
# vq training


def test_train_vqvae_single_clip_converges():
    cfg = tiny_config()
    cfg.data = DataSection(classes=1, frames=32, joints=4, train_clips=1, eval_clips=1)
    cfg.vqvae = VqSection(codes=16, d_code=16, residual_layers=1, downscale=4,
                          hidden=24, steps=500, batch=2, lr=2e-3, reset_every=25)
    train, _ = build_datasets(cfg)
    clip = crop_frames(train[0], 4)

    fresh, _, _ = train_vqvae(cfg, train, steps=0)
    initial = mpjpe(fresh.reconstruct(clip), clip)
    model, hist, _ = train_vqvae(cfg, train, steps=500)
    final = mpjpe(model.reconstruct(clip), clip)
    assert final < 0.10 * initial, f"{final:.1f} vs initial {initial:.1f}"


def test_train_vqvae_divergence_aborts():
    cfg = tiny_config()
    cfg.vqvae.lr = 1e6  # force blow-up
    train, _ = build_datasets(cfg)
    from stme.train import TrainingDiverged

    with pytest.raises(TrainingDiverged, match="diverged"):
        train_vqvae(cfg, train, steps=200)


def test_frozen_codebooks_match_pure_reconstruction_trace():
    cfg = tiny_config()
    cfg.vqvae.freeze_codebooks = True
    cfg.vqvae.ema_decay = 1.0
    cfg.vqvae.steps = 12
    train, _ = build_datasets(cfg)
    _, history, _ = train_vqvae(cfg, train)

    # independent oracle: replay the loop with no codebook machinery at all
    from stme import tensor as T
    from stme.optim import Adam
    from stme.train import build_vq_model, common_frame_count
    from stme.vqvae import FeatureNorm
    from stme.motion import MotionGrid

    model = build_vq_model(cfg, 4, pose_level=False)
    frames = common_frame_count(train, 4)
    cropped = [crop_frames(g, 4) for g in train]
    cropped = [MotionGrid(g.joint_feats[:frames], g.global_feats[:frames], g.fps, g.label)
               for g in cropped]
    planes = np.stack([grid_to_planes(g) for g in cropped])
    model.norm = FeatureNorm.fit(planes)
    targets = model.norm.normalize(planes).astype(np.float32)
    mask = plane_loss_mask(4, frames)
    opt = Adam(model.parameters(), lr=cfg.vqvae.lr, betas=(0.9, cfg.vqvae.beta2))
    rng = make_rng(cfg.seed, "vq-batches", 0)
    oracle = []
    for step in range(12):
        idx = rng.integers(0, len(planes), size=4)
        v = model.encode_batch(planes[idx])
        tokens, qsum, norms, _ = model.quantize_stack_batch(v.data, collect_residuals=True)
        dec_in = T.add(v, Tensor(qsum - v.data))
        recon = model.decode_batch(dec_in)
        loss = vq_loss_tensors(recon, targets[idx], v, qsum, cfg.vqvae.alpha, mask)
        opt.zero_grad()
        loss.backward()
        opt.step()
        oracle.append(loss.item())
    assert history == oracle  # bit-exact


def test_train_vqvae_resume_is_bit_exact(tmp_path):
    cfg = tiny_config()
    cfg.vqvae.steps = 20
    train, _ = build_datasets(cfg)
    full_model, full_hist, _ = train_vqvae(cfg, train, steps=20)

    ckpt = tmp_path / "vq-half.stck"
    half_model, half_hist, _ = train_vqvae(cfg, train, steps=10, out_path=str(ckpt))
    resumed_model, resumed_hist, _ = train_vqvae(cfg, train, steps=20, resume=str(ckpt))
    assert resumed_hist == full_hist

    probe = crop_frames(train[0], 4)
    a = full_model.reconstruct(probe)
    b = resumed_model.reconstruct(probe)
    assert np.array_equal(a.joint_feats, b.joint_feats)
    assert np.array_equal(a.global_feats, b.global_feats)


def test_vq_checkpoint_round_trip(tmp_path):
    cfg = tiny_config()
    train, _ = build_datasets(cfg)
    path = tmp_path / "vq.stck"
    model, _, _ = train_vqvae(cfg, train, out_path=str(path))
    loaded, meta = load_vq_model(str(path))
    assert meta["kind"] == "joint-vq"
    assert meta["seed"] == cfg.seed
    probe = crop_frames(train[0], 4)
    a, b = model.reconstruct(probe), loaded.reconstruct(probe)
    assert np.array_equal(a.joint_feats, b.joint_feats)
    stack_a, stack_b = model.tokenize(probe), loaded.tokenize(probe)
    assert np.array_equal(stack_a, stack_b)


# ---------------------------------------------------------------------------
# transformer training


def test_tokenize_dataset_shapes():
    cfg = tiny_config()
    train, _ = build_datasets(cfg)
    vq, _, _ = train_vqvae(cfg, train, steps=5)
    stacks, labels = tokenize_dataset(vq, train)
    assert stacks.shape == (2, 12, 8, 5)
    assert stacks.max() < cfg.vqvae.codes
    assert set(labels) == {0, 1, 2, 3}


def test_mask_transformer_initial_loss_near_log_c():
    cfg = tiny_config()
    cfg.vqvae = VqSection(codes=64, d_code=8, residual_layers=1, downscale=4,
                          hidden=12, steps=5, batch=4, lr=2e-3)
    train, _ = build_datasets(cfg)
    vq, _, _ = train_vqvae(cfg, train, steps=5)
    _, hist, _ = train_mask_transformer(cfg, vq, train, steps=1)
    assert abs(hist[0] - math.log(64)) < 0.1 * math.log(64)


def test_mask_transformer_overfits_four_clips():
    cfg = tiny_config()
    cfg.data = DataSection(classes=4, frames=32, joints=4, train_clips=4, eval_clips=4)
    cfg.transformer = TransformerSection(layers=2, heads=4, d_model=64, ffn_mult=4,
                                         d_text=32, steps=400, batch=4, lr=1e-3,
                                         uncond_prob=0.0)
    train, _ = build_datasets(cfg)
    vq, _, _ = train_vqvae(cfg, train, steps=60)
    model, hist, _ = train_mask_transformer(cfg, vq, train, steps=400)
    assert min(hist) < 0.2, f"min loss {min(hist):.3f}"


def test_unconditional_branch_frequency():
    # the branch decision stream: ~10% +/- 1% over 1e4 steps
    cfg = tiny_config()
    rng = make_rng(cfg.seed, "mask-uncond")
    draws = rng.random((10_000, cfg.transformer.batch)) < cfg.transformer.uncond_prob
    rate = draws.mean()
    assert abs(rate - 0.10) < 0.01

    # and the trainer counts through the same stream
    train, _ = build_datasets(cfg)
    vq, _, _ = train_vqvae(cfg, train, steps=5)
    _, _, meta = train_mask_transformer(cfg, vq, train, steps=30)
    expect = (make_rng(cfg.seed, "mask-uncond").random((30, cfg.transformer.batch))
              < cfg.transformer.uncond_prob).sum()
    assert meta["uncond_count"] == int(expect)


def test_mask_transformer_resume_bit_exact(tmp_path):
    cfg = tiny_config()
    train, _ = build_datasets(cfg)
    vq, _, _ = train_vqvae(cfg, train, steps=5)
    _, full_hist, _ = train_mask_transformer(cfg, vq, train, steps=14)
    ckpt = tmp_path / "mask.stck"
    train_mask_transformer(cfg, vq, train, steps=7, out_path=str(ckpt))
    _, resumed, _ = train_mask_transformer(cfg, vq, train, steps=14, resume=str(ckpt))
    assert resumed == full_hist


def test_residual_layer_draws_uniform():
    cfg = tiny_config()
    depth = 5
    rng = make_rng(cfg.seed, "res-layers")
    draws = np.array([int(rng.integers(1, depth + 1)) for _ in range(10_000)])
    for level in range(1, depth + 1):
        assert abs((draws == level).mean() - 1 / depth) < 0.02


def test_residual_transformer_trains_and_overfits():
    cfg = tiny_config()
    cfg.data = DataSection(classes=4, frames=32, joints=4, train_clips=4, eval_clips=4)
    cfg.transformer = TransformerSection(layers=2, heads=4, d_model=64, ffn_mult=4,
                                         d_text=32, steps=60, res_steps=400, batch=4,
                                         lr=1e-3, uncond_prob=0.0)
    train, _ = build_datasets(cfg)
    vq, _, _ = train_vqvae(cfg, train, steps=60)
    model, hist, _ = train_residual_transformer(cfg, vq, train, steps=400)
    assert abs(hist[0] - math.log(16)) < 0.2 * math.log(16)
    assert min(hist) < 0.2, f"min loss {min(hist):.3f}"


def test_residual_transformer_requires_layers():
    cfg = tiny_config()
    cfg.vqvae.residual_layers = 0
    train, _ = build_datasets(cfg)
    vq, _, _ = train_vqvae(cfg, train, steps=2)
    with pytest.raises(ValueError, match="residual_layers"):
        train_residual_transformer(cfg, vq, train, steps=2)


def test_transformer_checkpoints_round_trip(tmp_path):
    cfg = tiny_config()
    train, _ = build_datasets(cfg)
    vq, _, _ = train_vqvae(cfg, train, steps=5)
    mask_path = tmp_path / "mask.stck"
    res_path = tmp_path / "res.stck"
    mask_model, _, _ = train_mask_transformer(cfg, vq, train, out_path=str(mask_path))
    res_model, _, _ = train_residual_transformer(cfg, vq, train, out_path=str(res_path))

    mask_loaded, _ = load_mask_model(str(mask_path))
    res_loaded, _ = load_residual_model(str(res_path))
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, 16, size=(3, 5))
    cond = rng.standard_normal(16).astype(np.float32)
    assert np.array_equal(mask_model.forward(tokens, cond), mask_loaded.forward(tokens, cond))
    summed = rng.standard_normal((3, 5, 8)).astype(np.float32)
    assert np.array_equal(res_model.forward(summed, 1, cond),
                          res_loaded.forward(summed, 1, cond))


# ---------------------------------------------------------------------------
# ablation


def test_run_ablation_report_structure():
    cfg = tiny_config()
    cfg.data = DataSection(classes=4, frames=32, joints=4, train_clips=8, eval_clips=4)
    cfg.ablation.seeds = 2
    cfg.ablation.steps = 10
    cfg.ablation.batch = 4
    rows, csv_text, wins = run_ablation(cfg)
    assert len(rows) == 4  # 2 systems x 2 seeds
    assert {r.system for r in rows} == {"joint2d", "pose1d"}
    budgets = {r.codebook_params for r in rows}
    assert len(budgets) == 1  # matched exactly
    lines = csv_text.strip().splitlines()
    assert lines[0] == "system,seed,held_out_mpjpe_mm,codebook_params"
    assert len(lines) == 6  # header + 4 rows + win count comment
    assert 0 <= wins <= 2


# ---------------------------------------------------------------------------
# CLI


def _write_tiny_cli_config(tmp_path):
    cfg = tiny_config()
    cfg.out_dir = str(tmp_path / "run")
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(config_to_dict(cfg)))
    return cfg, str(path)


def test_cli_synth_writes_readable_clips(tmp_path):
    out = tmp_path / "clips"
    rc = cli.main(["synth", "--classes", "2", "--clips", "6", "--frames", "16",
                   "--joints", "3", "--out", str(out)])
    assert rc == 0
    files = sorted(os.listdir(out))
    assert len(files) == 6
    grid = read_mgrid(out / files[0])
    assert grid.frames == 16 and grid.joints == 3

    # same seed twice -> byte-identical artifacts
    out2 = tmp_path / "clips2"
    cli.main(["synth", "--classes", "2", "--clips", "6", "--frames", "16",
              "--joints", "3", "--out", str(out2)])
    for name in files:
        assert (out / name).read_bytes() == (out2 / name).read_bytes()


def test_worker_map_order_is_index_stable(monkeypatch):
    from stme.parallel import worker_map

    def job(i):
        return make_rng(0, "job", i).integers(0, 1000)

    serial = worker_map(job, range(24))
    monkeypatch.setenv("STME_THREADS", "3")
    threaded = worker_map(job, range(24))
    assert serial == threaded


def test_cli_usage_error_exit_code_1(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["generate"])  # missing required args
    assert exc.value.code == 1


def test_cli_runtime_error_exit_code_2(tmp_path, capsys):
    rc = cli.main(["eval", "--gen", str(tmp_path / "nope"), "--ref", str(tmp_path / "nope")])
    assert rc == 2


def test_cli_full_pipeline_and_generate_determinism(tmp_path):
    cfg, cfg_path = _write_tiny_cli_config(tmp_path)
    assert cli.main(["train-vq", cfg_path, "--log-every", "0"]) == 0
    assert cli.main(["train-mask", cfg_path, "--log-every", "0"]) == 0
    assert cli.main(["train-res", cfg_path, "--log-every", "0"]) == 0
    run_dir = cfg.out_dir
    out1 = tmp_path / "a.mgrd"
    out2 = tmp_path / "b.mgrd"
    for out in (out1, out2):
        rc = cli.main(["generate", "--ckpt", run_dir, "--label", "1", "--frames", "32",
                       "--seed", "9", "--out", str(out)])
        assert rc == 0
    assert out1.read_bytes() == out2.read_bytes()  # byte-identical

    # different seed differs
    out3 = tmp_path / "c.mgrd"
    cli.main(["generate", "--ckpt", run_dir, "--label", "1", "--frames", "32",
              "--seed", "10", "--out", str(out3)])
    assert out1.read_bytes() != out3.read_bytes()

    # edit round trip: empty mask reproduces tokenization of the input
    mask_path = tmp_path / "mask.json"
    mask_path.write_text(json.dumps({"frames": [0, 1]}))
    edited = tmp_path / "edited.mgrd"
    rc = cli.main(["edit", "--in", str(out1), "--mask", str(mask_path), "--label", "0",
                   "--ckpt", run_dir, "--out", str(edited)])
    assert rc == 0
    assert read_mgrid(edited).frames == 32


def test_cli_eval_reports(tmp_path):
    ref = tmp_path / "ref"
    gen = tmp_path / "gen"
    cli.main(["synth", "--classes", "4", "--clips", "40", "--frames", "32",
              "--joints", "4", "--seed", "1", "--out", str(ref)])
    cli.main(["synth", "--classes", "4", "--clips", "40", "--frames", "32",
              "--joints", "4", "--seed", "2", "--out", str(gen)])
    out_prefix = tmp_path / "report"
    rc = cli.main(["eval", "--gen", str(gen), "--ref", str(ref), "--repeats", "3",
                   "--d-feat", "16", "--out", str(out_prefix), "--svg"])
    assert rc == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["repeats"] == 3
    assert "fid" in report["metrics"] and "mm_dist" in report["metrics"]
    assert (tmp_path / "report.csv").read_text().startswith("metric,mean,ci95")
    assert (tmp_path / "report.svg").read_text().startswith("<svg")
