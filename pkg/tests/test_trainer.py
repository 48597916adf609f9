import csv
from dataclasses import replace

import numpy as np
import pytest

from mmflow.errors import ContractError
from mmflow.flowmatch import RoutingConfig, TaskMode
from mmflow.modality import Modality
from mmflow.numerics.autodiff import Tensor
from mmflow.numerics.rng import Rng
from mmflow.trainer import (
    BatchItem,
    CurriculumStage,
    LOSS_COLUMNS,
    TrainConfig,
    adam_update,
    build_batch,
    curriculum,
    group_histogram,
    init_adam,
    load_checkpoint,
    loss_grad_check,
    make_eval_batch,
    ordering_report,
    run_convergence_suite,
    run_curriculum,
    train_step,
)
from mmflow.model import UnifiedDiT

ROUTING = RoutingConfig()
STAGE2 = CurriculumStage(2, frozenset(int(m) for m in (1, 2, 3, 4, 5)), "standard")


def _cfg(tiny_cfg, **kw):
    base = dict(batch_size=8, total_steps=6, stage1_steps=2, lr=1e-3, model=tiny_cfg, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation(tiny_cfg):
    with pytest.raises(ContractError):
        TrainConfig(batch_size=6)
    with pytest.raises(ContractError):
        TrainConfig(total_steps=10, stage1_steps=11)
    with pytest.raises(ContractError):
        TrainConfig(modalities_enabled=(0,))
    cfg = _cfg(tiny_cfg)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_curriculum_stage_sets(tiny_cfg):
    s1, s2 = curriculum(_cfg(tiny_cfg))
    assert s1.allowed_modalities == {Modality.DEPTH, Modality.FLOW, Modality.PARTS} and s1.data_difficulty == "easy"
    assert s2.allowed_modalities == {1, 2, 3, 4, 5} and s2.data_difficulty == "standard"


def test_batch_balance_and_stage1_gate(tiny_cfg, tiny_data):
    s1, _ = curriculum(_cfg(tiny_cfg))
    for k in range(50):
        batch = build_batch(tiny_data["easy"], s1, Rng(k), 8, ROUTING)
        assert group_histogram(batch) == (2, 2, 2, 2)
        assert len({it.index for it in batch}) == 8
        assert all(it.modality in (1, 2, 5) for it in batch)
        assert all(tiny_data["easy"].groups[it.index] == it.group for it in batch)


def test_batch_mode_statistics(tiny_data):
    counts = np.zeros(3)
    for k in range(2000):
        for it in build_batch(tiny_data["standard"], STAGE2, Rng(1).derive(k), 16, ROUTING):
            counts[it.mode] += 1
            if it.mode is TaskMode.CONDITIONAL:
                assert it.noise.t_m == 0.0
            if it.mode is TaskMode.ESTIMATION:
                assert it.noise.t_r == 0.0
    np.testing.assert_allclose(counts / counts.sum(), ROUTING.probs, atol=0.01)


def test_batch_rejects_thin_group(tiny_data):
    with pytest.raises(ContractError, match="group"):
        build_batch(tiny_data["standard"], STAGE2, Rng(0), 64, ROUTING)


def _params(vals):
    return {"w": Tensor(np.array(vals, dtype=np.float64), requires_grad=True)}


def test_adam_zero_grad_keeps_params():
    p = _params([1.0, -2.0])
    st = init_adam(p)
    adam_update(p, {"w": np.zeros(2)}, st, lr=0.1)
    assert st["step"] == 1 and p["w"].data.tolist() == [1.0, -2.0]


def test_adam_first_step_formula():
    p = _params([0.5, 0.5, 0.5])
    g = np.array([0.3, -2.0, 1e-9])
    st = init_adam(p)
    adam_update(p, {"w": g}, st, lr=0.01, eps=1e-8)
    # m_hat = g, v_hat = g^2 at step one.
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g * g) / (1 - 0.999)
    np.testing.assert_allclose(p["w"].data, 0.5 - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=0, atol=1e-15)


def test_adam_constant_gradient_limit():
    p = _params([0.0, 0.0])
    st = init_adam(p)
    prev = p["w"].data.copy()
    for _ in range(2000):
        adam_update(p, {"w": np.array([0.7, -3.0])}, st, lr=1e-3)
        step = p["w"].data - prev
        prev = p["w"].data.copy()
    np.testing.assert_allclose(step, [-1e-3, 1e-3], rtol=0.01)


def test_estimation_only_step_zeroes_rgb_head(tiny_cfg, tiny_data):
    cfg = _cfg(tiny_cfg, routing=RoutingConfig(0.0, 1.0, 0.0, unordered=True))
    model = UnifiedDiT(tiny_cfg, seed=0)
    batch = build_batch(tiny_data["standard"], STAGE2, Rng(0), 8, cfg.routing)
    assert all(it.mode is TaskMode.ESTIMATION for it in batch)
    before = model.params["heads.w"].data[0].copy()
    train_step(model, tiny_data["standard"], batch, init_adam(model.params), cfg, 0)
    g = model.params["heads.w"].grad
    assert not np.any(g[0]) and not np.any(model.params["heads.b"].grad[0])
    assert np.array_equal(model.params["heads.w"].data[0], before)
    used = {it.modality for it in batch}
    assert all(np.any(g[m]) for m in used)


def test_single_sample_loss_gradients(tiny_cfg):
    res = loss_grad_check(tiny_cfg, seed=1, coords_per_param=3)
    assert res["max"] < 1e-5


def _csv(path):
    return path.read_bytes()


def test_run_curriculum_outputs(tiny_cfg, tiny_data, tmp_path):
    cfg = _cfg(tiny_cfg)
    res = run_curriculum(cfg, tiny_data, tmp_path)
    rows = list(csv.reader(open(res["loss_csv"])))
    assert tuple(rows[0]) == LOSS_COLUMNS and len(rows) - 1 == cfg.total_steps
    for r in rows[1:1 + cfg.stage1_steps]:
        assert not set(r[2].split("+")) & {"segmentation", "keypoints"}
    batches = list(csv.reader(open(tmp_path / "batches.csv")))[1:]
    assert all(b[2] == "2/2/2/2" for b in batches)
    assert (tmp_path / "stage1" / "state.json").exists() and (tmp_path / "final" / "params.bin").exists()


def test_stage1_zero_is_pure_stage2(tiny_cfg, tiny_data, tmp_path):
    run_curriculum(_cfg(tiny_cfg, stage1_steps=0, total_steps=3), {"standard": tiny_data["standard"]}, tmp_path)
    stages = [r[1] for r in list(csv.reader(open(tmp_path / "batches.csv")))[1:]]
    assert stages == ["2", "2", "2"]


def test_repeat_run_is_byte_identical(tiny_cfg, tiny_data, tmp_path):
    cfg = _cfg(tiny_cfg)
    run_curriculum(cfg, tiny_data, tmp_path / "a")
    run_curriculum(cfg, tiny_data, tmp_path / "b")
    assert _csv(tmp_path / "a" / "loss.csv") == _csv(tmp_path / "b" / "loss.csv")
    assert _csv(tmp_path / "a" / "final" / "params.bin") == _csv(tmp_path / "b" / "final" / "params.bin")


def test_resume_matches_uninterrupted(tiny_cfg, tiny_data, tmp_path):
    cfg = _cfg(tiny_cfg)
    run_curriculum(cfg, tiny_data, tmp_path / "full")
    run_curriculum(cfg, tiny_data, tmp_path / "cut", stop_at=3)
    assert len(_csv(tmp_path / "cut" / "loss.csv").splitlines()) == 4
    run_curriculum(cfg, tiny_data, tmp_path / "cut", resume=True)
    assert _csv(tmp_path / "full" / "loss.csv") == _csv(tmp_path / "cut" / "loss.csv")
    assert _csv(tmp_path / "full" / "final" / "params.bin") == _csv(tmp_path / "cut" / "final" / "params.bin")
    assert _csv(tmp_path / "full" / "final" / "adam_v.bin") == _csv(tmp_path / "cut" / "final" / "adam_v.bin")


def test_resume_with_other_config_rejected(tiny_cfg, tiny_data, tmp_path):
    run_curriculum(_cfg(tiny_cfg), tiny_data, tmp_path, stop_at=2)
    with pytest.raises(ContractError, match="config"):
        run_curriculum(_cfg(tiny_cfg, lr=5e-3), tiny_data, tmp_path, resume=True)


def test_checkpoint_roundtrip(tiny_cfg, tiny_data, tmp_path):
    cfg = _cfg(tiny_cfg, total_steps=2, stage1_steps=0)
    res = run_curriculum(cfg, {"standard": tiny_data["standard"]}, tmp_path)
    model, opt, cfg2, step = load_checkpoint(res["checkpoint"], expect=cfg)
    assert step == 2 and cfg2 == cfg and opt["step"] == 2
    for k, p in res["model"].params.items():
        assert np.array_equal(p.data, model.params[k].data)


def test_rgb_only_arm_runs_single_stream(tiny_cfg, tiny_data, tmp_path):
    cfg = _cfg(tiny_cfg, modalities_enabled=())
    run_curriculum(cfg, tiny_data, tmp_path)
    rows = list(csv.reader(open(tmp_path / "loss.csv")))[1:]
    assert {r[2] for r in rows} == {"none"} and all(r[5] == "nan" for r in rows)


def test_convergence_suite_schema(tiny_cfg, tiny_data, tmp_path):
    cfg = _cfg(tiny_cfg, total_steps=4, stage1_steps=2)
    eval_set = tiny_data["standard"]
    res = run_convergence_suite(cfg, tiny_data, tmp_path, seeds=(0,), eval_every=2, eval_set=eval_set, n_eval=4)
    rows = list(csv.reader(open(res["csv"])))
    assert rows[0] == ["step", "arm", "seed", "rgb_eval_mse"]
    arms = {r[1] for r in rows[1:]}
    assert arms == {"rgb_only", "single_depth", "unified"}
    assert [int(r[0]) for r in rows[1:] if r[1] == "unified"] == [0, 2, 4]
    # Every arm starts from the same evaluation batch.
    again = make_eval_batch(eval_set, 4, 20240917)
    assert again.rgb.tobytes() == res["eval_batch"].rgb.tobytes()
    rep = ordering_report(res["final"])
    assert set(rep["median"]) == {"A", "B", "C"}
