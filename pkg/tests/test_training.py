import numpy as np
import pytest
import torch

from amtnet.data import SyntheticSpec, synthetic_split
from amtnet.episodes import EpisodeSpec, evaluate, sample_episode
from amtnet.errors import ContractViolation, NonFiniteLoss
from amtnet.model import AMTNet
from amtnet.training import (METRICS_LOG_HEADER, Trainer, TrainConfig, build_model, check_teacher_compatible,
                             distill, forward_episode, train)

TOY = dict(ways=3, shots=1, queries=3, width=8, episodes_per_epoch=5, epochs=2)


def _cfg(**kw):
    return TrainConfig(**{**TOY, **kw})


def _snapshot(model):
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return state


def _diff(a, b):
    return {k for k in a if not torch.equal(a[k], b[k])}


@pytest.mark.parametrize("variant", ["amm", "amm-v2"])
def test_phase_isolation(variant, tiny_base):
    cfg = _cfg(variant=variant, use_global=True, use_rotation=True, u_lr=0.5)
    model = build_model(cfg, tiny_base)
    trainer = Trainer(model, tiny_base, cfg)
    seen = []
    inner = trainer._u_phase

    def spy(episode):
        before = _snapshot(model)
        inner(episode)
        seen.append((before, _snapshot(model)))

    trainer._u_phase = spy
    for _ in range(10):
        start = _snapshot(model)
        trainer.step()
        after_phase1, after_phase2 = seen[-1]
        assert "fusion.u" not in _diff(start, after_phase1)
        assert _diff(after_phase1, after_phase2) <= {"fusion.u"}
    assert not torch.equal(model.fusion.u, torch.zeros(3))


def test_individual_variant_skips_u(tiny_base):
    cfg = _cfg(variant="euclidean")
    model = build_model(cfg, tiny_base)
    train(model, tiny_base, cfg)
    assert torch.equal(model.fusion.u.detach(), torch.zeros(3))
    assert model.relation is None


def test_individual_fusion_ignores_u(tiny_base, tiny_novel):
    cfg = _cfg(variant="euclidean")
    model = build_model(cfg, tiny_base)
    before = evaluate(model, tiny_novel, EpisodeSpec(3, 1, 3), 20)
    with torch.no_grad():
        model.fusion.u.copy_(torch.tensor([0.5, -0.7, 2.0]))
    after = evaluate(model, tiny_novel, EpisodeSpec(3, 1, 3), 20)
    assert before.episode_accuracies == after.episode_accuracies


def test_zero_epochs_returns_initial_model(tiny_base):
    cfg = _cfg(epochs=0)
    model = build_model(cfg, tiny_base)
    before = _snapshot(model)
    _, rows = train(model, tiny_base, cfg)
    assert rows == [] and not _diff(before, _snapshot(model))


def test_seeded_runs_identical(tmp_path, tiny_base):
    for run in ("a", "b"):
        cfg = _cfg(variant="amm", use_rotation=True)
        train(build_model(cfg, tiny_base), tiny_base, cfg, tmp_path / run)
    assert (tmp_path / "a" / "model.amt").read_bytes() == (tmp_path / "b" / "model.amt").read_bytes()
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()


def test_metrics_log(tmp_path, tiny_base):
    cfg = _cfg(variant="amm", use_global=True)
    _, rows = train(build_model(cfg, tiny_base), tiny_base, cfg, tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",") == METRICS_LOG_HEADER
    assert len(lines) == 1 + cfg.epochs
    assert np.isnan(rows[-1]["L_R"]) and np.isfinite(rows[-1]["L_G"])


def test_nmm_and_amm_logs_differ(tmp_path, tiny_base):
    for v in ("nmm", "amm"):
        cfg = _cfg(variant=v)
        train(build_model(cfg, tiny_base), tiny_base, cfg, tmp_path / v)
    assert (tmp_path / "nmm" / "metrics.csv").read_text() != (tmp_path / "amm" / "metrics.csv").read_text()


def test_non_finite_loss_aborts(tiny_base):
    cfg = _cfg(variant="nmm")
    model = build_model(cfg, tiny_base)
    trainer = Trainer(model, tiny_base, cfg)
    ep = sample_episode(tiny_base, cfg.episode, np.random.default_rng(0))
    tiny_base.images[ep.support_idx[0]] = float("nan")
    try:
        with pytest.raises(NonFiniteLoss):
            trainer.step(ep)
    finally:
        fresh = synthetic_split(SyntheticSpec(n_classes=8, samples_per_class=12, image_size=16, n_novel=3, seed=5))
        tiny_base.images.copy_(fresh.images)


def test_config_roundtrip_and_unknown_keys():
    cfg = _cfg(variant="AMM_V1")
    assert cfg.variant == "amm-v1"
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ContractViolation, match="unknown config keys"):
        TrainConfig.from_dict({"epochs": 1, "learning_rate": 0.1})
    with pytest.raises(ContractViolation):
        TrainConfig(reduction="max")


def test_loss_trend_over_200_steps():
    spec = SyntheticSpec(n_classes=10, samples_per_class=20, image_size=16, n_novel=2, noise=0.8, seed=11)
    base = synthetic_split(spec, "base")
    cfg = TrainConfig(variant="nmm", ways=5, shots=1, queries=5, width=16, epochs=1,
                      episodes_per_epoch=200, lr=0.02, seed=3)
    model = build_model(cfg, base)
    trainer = Trainer(model, base, cfg)
    losses = np.array([trainer.step().L_total.item() for _ in range(200)])
    windows = losses.reshape(10, 20).mean(axis=1)
    # non-increasing up to sampling noise between consecutive windows
    assert np.all(np.diff(windows) <= 0.05 * windows[:-1])
    assert windows[-1] < 0.6 * windows[0]


def test_separable_two_way_five_shot():
    spec = SyntheticSpec(n_classes=8, samples_per_class=30, image_size=16, n_novel=4, noise=0.2,
                         orientation_jitter=0.05, blob_jitter=0.03, seed=21)
    base, novel = synthetic_split(spec, "base"), synthetic_split(spec, "novel")
    cfg = TrainConfig(variant="nmm", ways=2, shots=5, queries=5, width=16, epochs=2, episodes_per_epoch=40,
                      lr=0.02, seed=0)
    model, _ = train(build_model(cfg, base), base, cfg)
    report = evaluate(model, novel, EpisodeSpec(2, 5, 5), 300, seed=1)
    assert report.mean_accuracy > 90.0


# --- distillation --------------------------------------------------------------

def test_beta_zero_matches_plain(tiny_base):
    cfg = _cfg(variant="amm", use_rotation=True)
    teacher, _ = train(build_model(cfg, tiny_base), tiny_base, cfg)
    plain, _ = train(build_model(cfg, tiny_base), tiny_base, cfg)
    kd_cfg = _cfg(variant="amm", use_rotation=True, beta=0.0)
    student, _ = distill(teacher, tiny_base, kd_cfg)
    assert not _diff(_snapshot(plain), _snapshot(student))


def test_self_distillation_starts_near_zero(tmp_path, tiny_base):
    from amtnet.auxiliary import kd_loss

    cfg = _cfg(variant="nmm", use_global=True)
    train(build_model(cfg, tiny_base), tiny_base, cfg, tmp_path)
    teacher = AMTNet.load(tmp_path / "model.amt").eval()
    student = AMTNet.load(tmp_path / "model.amt").eval()
    ep = sample_episode(tiny_base, cfg.episode, np.random.default_rng(5))
    with torch.no_grad():
        t = forward_episode(teacher, ep)
        s = forward_episode(student, ep)
        t_aux = [a.exp() for a in t.aux]
        kd = kd_loss([s.preds[m] for m in student.metrics], t.fused, s.aux, t_aux, beta=0.75)
    # the individual metrics still differ from the fused teacher; the auxiliary part vanishes
    aux_only = kd_loss([], t.fused, s.aux, t_aux, beta=0.75)
    assert aux_only.item() == pytest.approx(0.0, abs=1e-6)
    merged = [type(s.preds[m])(m, torch.log(t.fused)) for m in student.metrics]
    assert kd_loss(merged, t.fused, s.aux, t_aux, beta=0.75).item() == pytest.approx(0.0, abs=1e-5)
    assert kd.item() >= 0


def test_teacher_compatibility(tiny_base):
    a = build_model(_cfg(use_global=True), tiny_base)
    b = build_model(_cfg(use_global=False), tiny_base)
    with pytest.raises(ContractViolation, match="auxiliary"):
        check_teacher_compatible(a, b)


def test_forward_rotation_expands_queries(tiny_base):
    cfg = _cfg(variant="nmm", use_rotation=True)
    model = build_model(cfg, tiny_base)
    ep = sample_episode(tiny_base, cfg.episode, np.random.default_rng(0))
    fwd = forward_episode(model, ep)
    assert fwd.fused.shape == (cfg.episode.n_query * 4, 3)
    assert fwd.bundle.L_R is not None and fwd.bundle.L_G is None
