import json
import pickle

import numpy as np
import pytest
import torch

from gaitmil.data_io import Label, SynthSpec, generate_synthetic
from gaitmil.errors import (
    ArgumentError,
    ConfigurationError,
    DatasetError,
    NumericError,
    SchemaError,
)
from gaitmil.network import ModelConfig
from gaitmil.sampling import BatchPlan, make_batch
from gaitmil.training import (
    SCHEMA_VERSION,
    TrainConfig,
    config_from_dict,
    config_to_dict,
    current_lr,
    fit,
    init_state,
    load_checkpoint,
    make_checkpoint,
    restore_state,
    save_checkpoint,
    train_step,
)


def tiny_config(**kw):
    kw.setdefault("steps", 3)
    kw.setdefault("lr", 0.01)
    kw.setdefault("seed", 0)
    kw.setdefault("batch", BatchPlan(subjects_per_batch=2, clips_per_subject=2))
    kw.setdefault(
        "model",
        ModelConfig(
            n_bags=2,
            frames_per_clip=6,
            backbone_widths=(2, 4, 8),
            embed_dim=8,
            attention_dim=4,
        ),
    )
    return TrainConfig(**kw)


@pytest.fixture(scope="module")
def tiny_dataset():
    seqs, _ = generate_synthetic(SynthSpec(n_subjects_per_class=2, frames_per_sequence=24, seed=1))
    return seqs


def states_equal(a, b) -> bool:
    sa, sb = a.model.state_dict(), b.model.state_dict()
    return set(sa) == set(sb) and all(torch.equal(sa[k], sb[k]) for k in sa)


# ---------------------------------------------------------------- config


def test_config_round_trip_and_strictness():
    config = tiny_config(lr_milestones=(2,), margin=0.3, triplet_label="class")
    rebuilt = config_from_dict(config_to_dict(config))
    assert rebuilt == config

    payload = config_to_dict(config)
    payload["learning_rate"] = 0.5
    with pytest.raises(ArgumentError, match="learning_rate"):
        config_from_dict(payload)

    payload = config_to_dict(config)
    payload["model"]["depth"] = 4
    with pytest.raises(ArgumentError, match="depth"):
        config_from_dict(payload)


def test_config_validation():
    with pytest.raises(ArgumentError):
        tiny_config(lr=-0.1)
    with pytest.raises(ArgumentError):
        tiny_config(momentum=1.0)
    with pytest.raises(ArgumentError):
        tiny_config(lr_milestones=(5, 5))
    with pytest.raises(ArgumentError):
        tiny_config(lr_decay=0.0)
    with pytest.raises(ArgumentError):
        tiny_config(triplet_label="batch")
    with pytest.raises(ArgumentError):
        tiny_config(steps=-1)


def test_milestone_lr_schedule():
    config = tiny_config(lr=0.1, lr_milestones=(10, 20), lr_decay=0.1)
    assert current_lr(config, 0) == pytest.approx(0.1)
    assert current_lr(config, 9) == pytest.approx(0.1)
    assert current_lr(config, 10) == pytest.approx(0.01)
    assert current_lr(config, 19) == pytest.approx(0.01)
    assert current_lr(config, 20) == pytest.approx(0.001)


# ---------------------------------------------------------------- stepping


def test_zero_lr_is_a_null_step(tiny_dataset):
    config = tiny_config(lr=0.0)
    state = init_state(config)
    before = {k: v.clone() for k, v in state.model.state_dict().items()}
    batch = make_batch(tiny_dataset, config.batch, state.rng, config.model.frames_per_clip)
    breakdown = train_step(state, batch)
    assert breakdown.total == breakdown.triplet + breakdown.ce
    after = state.model.state_dict()
    for key, tensor in before.items():
        if "running" in key or "num_batches" in key:
            continue  # BN statistics legitimately move in train mode
        assert torch.equal(tensor, after[key]), key


def test_same_seed_same_trajectory(tiny_dataset):
    def run():
        config = tiny_config(steps=3)
        state = init_state(config)
        out = []
        for _ in range(config.steps):
            batch = make_batch(
                tiny_dataset, config.batch, state.rng, config.model.frames_per_clip
            )
            out.append(train_step(state, batch))
        return out, state

    first, state_a = run()
    second, state_b = run()
    assert [b.total for b in first] == [b.total for b in second]
    assert states_equal(state_a, state_b)


def test_training_changes_parameters(tiny_dataset):
    config = tiny_config(steps=2)
    state = init_state(config)
    before = {k: v.clone() for k, v in state.model.state_dict().items()}
    for _ in range(2):
        batch = make_batch(tiny_dataset, config.batch, state.rng, config.model.frames_per_clip)
        train_step(state, batch)
    changed = any(
        not torch.equal(before[k], v)
        for k, v in state.model.state_dict().items()
        if "num_batches" not in k
    )
    assert changed


def test_non_finite_loss_names_subjects(tiny_dataset):
    config = tiny_config()
    state = init_state(config)
    with torch.no_grad():
        state.model.neck.classifier.fill_(float("inf"))
    batch = make_batch(tiny_dataset, config.batch, state.rng, config.model.frames_per_clip)
    with pytest.raises(NumericError, match="batch subjects"):
        train_step(state, batch)


def test_bn_stats_move_only_in_training(tiny_dataset):
    config = tiny_config()
    state = init_state(config)
    batch = make_batch(tiny_dataset, config.batch, state.rng, config.model.frames_per_clip)
    stats = lambda: state.model.neck.norms[0].running_mean.clone()
    state.model.eval()
    baseline = stats()
    with torch.no_grad():
        state.model.forward_clips(batch, None)
    assert torch.equal(stats(), baseline)
    train_step(state, batch)
    assert not torch.equal(stats(), baseline)


# ---------------------------------------------------------------- fit


def test_fit_steps_zero_equals_initialization(tiny_dataset, tmp_path):
    config = tiny_config(steps=0)
    checkpoint = fit(config, tiny_dataset, checkpoint_dir=tmp_path)
    fresh = init_state(config)
    for name, arr in checkpoint["model"].items():
        assert np.array_equal(arr, fresh.model.state_dict()[name].numpy()), name
    assert checkpoint["step"] == 0
    assert (tmp_path / "checkpoint_final.pkl").is_file()


def test_fit_requires_all_classes_for_stratified(tiny_dataset):
    partial = [s for s in tiny_dataset if s.label != Label.NEUTRAL]
    with pytest.raises(ConfigurationError, match="neutral"):
        fit(tiny_config(), partial)


def test_fit_writes_json_log_with_mil_flag(tiny_dataset, tmp_path):
    log = tmp_path / "train.jsonl"
    fit(tiny_config(steps=2), tiny_dataset, log_path=log)
    lines = [json.loads(line) for line in log.read_text().splitlines()]
    assert lines[0]["event"] == "config"
    assert lines[0]["model"]["mil_enabled"] is True
    steps = [line for line in lines if "step" in line]
    assert len(steps) == 2
    assert {"triplet", "ce", "total", "n_valid", "lr"} <= set(steps[0])


def test_fit_runs_with_mil_disabled(tiny_dataset, tmp_path):
    config = tiny_config(steps=2, model=ModelConfig(
        n_bags=2, frames_per_clip=6, backbone_widths=(2, 4, 8),
        embed_dim=8, attention_dim=4, mil_enabled=False,
    ))
    log = tmp_path / "off.jsonl"
    checkpoint = fit(config, tiny_dataset, log_path=log)
    assert checkpoint["step"] == 2
    lines = [json.loads(line) for line in log.read_text().splitlines()]
    assert lines[0]["model"]["mil_enabled"] is False


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_byte_identical(tiny_dataset, tmp_path):
    config = tiny_config(steps=2)
    checkpoint = fit(config, tiny_dataset)
    path_a, path_b = tmp_path / "a.pkl", tmp_path / "b.pkl"
    save_checkpoint(checkpoint, path_a)
    loaded = load_checkpoint(path_a)
    save_checkpoint(loaded, path_b)
    assert path_a.read_bytes() == path_b.read_bytes()


def test_checkpoint_schema_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_checkpoint(tmp_path / "missing.pkl")

    bad_version = make_checkpoint(init_state(tiny_config()))
    bad_version["schema_version"] = SCHEMA_VERSION + 1
    path = tmp_path / "bad.pkl"
    save_checkpoint(bad_version, path)
    with pytest.raises(SchemaError, match="schema version"):
        load_checkpoint(path)

    garbage = tmp_path / "garbage.pkl"
    garbage.write_bytes(pickle.dumps({"hello": 1}))
    with pytest.raises(SchemaError):
        load_checkpoint(garbage)


def test_checkpoint_model_config_mismatch(tiny_dataset, tmp_path):
    config = tiny_config(steps=1)
    checkpoint = fit(config, tiny_dataset)
    path = tmp_path / "ck.pkl"
    save_checkpoint(checkpoint, path)
    assert load_checkpoint(path, expected_model=config.model)["step"] == 1
    other = ModelConfig(
        n_bags=3, frames_per_clip=6, backbone_widths=(2, 4, 8), embed_dim=8, attention_dim=4
    )
    with pytest.raises(SchemaError, match="model config"):
        load_checkpoint(path, expected_model=other)


def test_restore_then_step_matches_uninterrupted(tiny_dataset):
    config = tiny_config(steps=4)

    state = init_state(config)
    for _ in range(2):
        batch = make_batch(tiny_dataset, config.batch, state.rng, config.model.frames_per_clip)
        train_step(state, batch)
    resumed = restore_state(make_checkpoint(state))
    assert states_equal(state, resumed)

    for s in (state, resumed):
        batch = make_batch(tiny_dataset, s.config.batch, s.rng, s.config.model.frames_per_clip)
        train_step(s, batch)
    assert states_equal(state, resumed)  # 0 ulp: bitwise-equal parameters


def test_fit_resume_equals_uninterrupted(tiny_dataset, tmp_path):
    config = tiny_config(steps=4, checkpoint_interval=2)
    full = fit(config, tiny_dataset, checkpoint_dir=tmp_path / "full")
    # Treat the half-way interval checkpoint as the survivor of a crash and
    # finish the run from it; the result must be bitwise-equal to the
    # uninterrupted run.
    resumed = fit(
        config,
        tiny_dataset,
        checkpoint_dir=tmp_path / "resumed",
        resume_from=tmp_path / "full" / "checkpoint_000002.pkl",
    )
    assert resumed["step"] == full["step"] == 4
    for name, arr in full["model"].items():
        assert np.array_equal(arr, resumed["model"][name]), name
    assert full["optimizer"]["momentum"].keys() == resumed["optimizer"]["momentum"].keys()
    for name, arr in full["optimizer"]["momentum"].items():
        assert np.array_equal(arr, resumed["optimizer"]["momentum"][name]), name
    assert full["rng_state"] == resumed["rng_state"]


def test_fit_resume_rejects_config_mismatch(tiny_dataset, tmp_path):
    config = tiny_config(steps=2, checkpoint_interval=1)
    fit(config, tiny_dataset, checkpoint_dir=tmp_path)
    with pytest.raises(SchemaError, match="resume config"):
        fit(
            tiny_config(steps=2, checkpoint_interval=1, lr=0.123),
            tiny_dataset,
            resume_from=tmp_path / "checkpoint_000001.pkl",
        )
