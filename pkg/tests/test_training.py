import hashlib
import math

import numpy as np
import pytest

from medvlbert import tensor as T
from medvlbert.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from medvlbert.errors import ConfigError, ContractError, CorruptFileError, HashMismatchError, ShapeMismatchError, VersionMismatchError
from medvlbert.experiments import build_model
from medvlbert.model import collate
from medvlbert.training import (
    AblationFlags,
    OptimConfig,
    ScheduleSpec,
    StageSpec,
    Trainer,
    alternate_train,
    check_compatible,
    epoch_plan,
    evaluate,
    multitask_loss,
    transfer_between_corpora,
)

from conftest import tiny_run_config

CFG = tiny_run_config()


@pytest.fixture
def trainer(tiny_bundle):
    return Trainer(build_model(CFG, tiny_bundle), OptimConfig(lr=1e-3, batch_size=8), seed=0)


def digest(arrays: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k]).tobytes())
    return h.hexdigest()


def params_with(model, prefix):
    return {n: p.data.copy() for n, p in model.named_parameters() if n.startswith(prefix)}


# -- loss --------------------------------------------------------------------------------

def test_multitask_loss_examples():
    assert multitask_loss(0.5, 2.0) == 2.5
    assert multitask_loss(0.5, 2.0, lam=0.0) == 2.0
    assert multitask_loss(0.5, 2.0, lam=2.0) == 3.0
    with pytest.raises(ContractError):
        multitask_loss(0.5, 2.0, lam=-1.0)


@pytest.mark.parametrize("kind,split", [("pretrain", "textbook"), ("transfer", "train")])
def test_lambda_zero_gives_zero_classifier_gradient(tiny_bundle, kind, split):
    model = build_model(CFG, tiny_bundle)
    tr = Trainer(model, OptimConfig(lam=0.0))
    batch = collate(tiny_bundle.get("A", split).samples[:4])
    total, bd = tr.compute_losses(batch)
    T.backward(total)
    for name, p in model.named_parameters():
        if name.startswith("classifier."):
            assert np.array_equal(p.grad, np.zeros_like(p.data)), name
    assert bd.total == pytest.approx(bd.lm, abs=1e-6)


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0, 2.0])
def test_logged_total_equals_weighted_sum(tiny_bundle, lam):
    tr = Trainer(build_model(CFG, tiny_bundle), OptimConfig(lam=lam, batch_size=8))
    tr.run_pass(tiny_bundle.get("A", "textbook"), "pretrain", 0, 0)
    tr.run_pass(tiny_bundle.get("A", "train"), "transfer", 0, 0)
    steps = [e for e in tr.events if e["event"] == "step"]
    assert steps
    for e in steps:
        assert abs(e["loss"] - (e["lambda"] * e["l_cls"] + e["l_t"])) <= 1e-6


def test_lm_loss_is_batch_average_of_sums(tiny_bundle, trainer):
    from medvlbert.decoder import lm_loss, shift_for_teacher_forcing

    batch = collate(tiny_bundle.get("A", "train").samples[:3])
    _, bd = trainer.compute_losses(batch)
    tf = trainer.model.encode("transfer", batch)
    inputs, targets = shift_for_teacher_forcing(batch.ids)
    summed = lm_loss(trainer.model.decoder.forward(inputs, tf), targets).item()
    assert bd.lm == pytest.approx(summed / 3, rel=1e-5)
    assert bd.lm_per_token == pytest.approx(summed / bd.n_tokens, rel=1e-5)


# -- steps ---------------------------------------------------------------------------

def test_step_kind_mismatch(tiny_bundle, trainer):
    with pytest.raises(ContractError):
        trainer.transfer_step(tiny_bundle.get("A", "textbook").samples[:2])
    with pytest.raises(ContractError):
        trainer.pretraining_step(tiny_bundle.get("A", "train").samples[:2])
    with pytest.raises(ContractError):
        collate([])


def test_pretraining_leaves_visual_branch_untouched(tiny_bundle, trainer):
    before = {p: digest(params_with(trainer.model, p)) for p in ("visual_encoder.", "patch.")}
    for _ in range(3):
        trainer.pretraining_step(tiny_bundle.get("A", "textbook").samples[:8])
    for p, h in before.items():
        assert digest(params_with(trainer.model, p)) == h
    assert digest(params_with(trainer.model, "decoder.")) != ""


def test_transfer_leaves_textual_branch_untouched(tiny_bundle, trainer):
    before = {p: digest(params_with(trainer.model, p)) for p in ("textual_encoder.", "textbook.")}
    trainer.transfer_step(tiny_bundle.get("A", "train").samples[:8])
    for p, h in before.items():
        assert digest(params_with(trainer.model, p)) == h


def test_decoder_shared_between_procedures(trainer):
    pre = {n for n in trainer.model.path_parameters("pretrain") if n.startswith("decoder.")}
    tra = {n for n in trainer.model.path_parameters("transfer") if n.startswith("decoder.")}
    all_dec = {n for n, _ in trainer.model.named_parameters() if n.startswith("decoder.")}
    assert pre == tra == all_dec and pre


def test_patch_learning_rate_override(trainer):
    assert trainer.state.lr_for("patch.proj.weight") == 1e-6
    assert trainer.state.lr_for("decoder.final_norm.gain") == 1e-3


def test_steps_deterministic(tiny_bundle):
    def run():
        tr = Trainer(build_model(CFG, tiny_bundle), OptimConfig(), seed=5)
        tr.run_pass(tiny_bundle.get("A", "train"), "transfer", 0, 0)
        return [e["loss"] for e in tr.events], digest(tr.model.state_dict())

    assert run() == run()


def test_nonfinite_loss_raises(tiny_bundle, trainer):
    from medvlbert.errors import NumericError

    trainer.model.decoder.final_norm.gain.data[:] = np.nan
    with pytest.raises(NumericError):
        trainer.transfer_step(tiny_bundle.get("A", "train").samples[:2])


def test_convergence_smoke(tiny_bundle):
    tr = Trainer(build_model(CFG, tiny_bundle), OptimConfig(lr=3e-3, batch_size=8), seed=0)
    samples = tiny_bundle.get("A", "train").samples[:8]
    losses = [tr.transfer_step(samples).total for _ in range(200)]
    assert np.mean(losses[-10:]) < 0.25 * np.mean(losses[:10])


# -- schedule ---------------------------------------------------------------------------

def test_epoch_plan_variants():
    assert epoch_plan(ScheduleSpec(1, 3, 2), AblationFlags()) == [(1, 3), (1, 3)]
    assert epoch_plan(ScheduleSpec(1, 3, 2), AblationFlags(alternate_training=False)) == [(1, 0), (1, 0), (0, 3), (0, 3)]
    assert epoch_plan(ScheduleSpec(0, 2, 2), AblationFlags(external_knowledge=False)) == [(0, 2), (0, 2)]
    with pytest.raises(ConfigError):
        epoch_plan(ScheduleSpec(1, 3, 2), AblationFlags(external_knowledge=False))
    for bad in ((0, 0), (-1, 2)):
        with pytest.raises(ConfigError):
            ScheduleSpec(*bad)


def test_event_order_follows_schedule(tiny_bundle, trainer):
    alternate_train(trainer, tiny_bundle.get("A", "textbook"), tiny_bundle.get("A", "train"), ScheduleSpec(1, 3, 2), AblationFlags())
    seq = []
    for e in trainer.events:
        if e["event"] == "epoch_start":
            seq.append(("start", e["epoch"]))
        elif e["event"] == "step":
            key = (e["epoch"], e["procedure"], e["pass"])
            if not seq or seq[-1] != key:
                seq.append(key)
    expected = []
    for ep in range(2):
        expected += [("start", ep), (ep, "pretrain", 0), (ep, "transfer", 0), (ep, "transfer", 1), (ep, "transfer", 2)]
    assert seq == expected
    steps = [e["step"] for e in trainer.events if e["event"] == "step"]
    assert steps == list(range(1, len(steps) + 1))


@pytest.mark.parametrize("mn,kind", [((1, 0), "pretrain"), ((0, 1), "transfer")])
def test_degenerate_schedules_touch_expected_names(tiny_bundle, mn, kind):
    tr = Trainer(build_model(CFG, tiny_bundle), OptimConfig(), seed=0)
    before = tr.model.state_dict()
    alternate_train(tr, tiny_bundle.get("A", "textbook"), tiny_bundle.get("A", "train"), ScheduleSpec(*mn, epochs=1), AblationFlags())
    expected = set(tr.model.path_parameters(kind))
    assert set(tr.state.first_moment) == expected
    after = tr.model.state_dict()
    for name in before:
        if name not in expected:
            assert np.array_equal(before[name], after[name]), name
    assert {n for n in expected if not np.array_equal(before[n], after[n])}
    assert {e["procedure"] for e in tr.events if e["event"] == "step"} == {kind}


def test_sequential_ablation_runs_pretraining_first(tiny_bundle, trainer):
    alternate_train(
        trainer, tiny_bundle.get("A", "textbook"), tiny_bundle.get("A", "train"), ScheduleSpec(1, 1, 2), AblationFlags(alternate_training=False)
    )
    procs = [e["procedure"] for e in trainer.events if e["event"] == "step"]
    first_transfer = procs.index("transfer")
    assert set(procs[:first_transfer]) == {"pretrain"} and set(procs[first_transfer:]) == {"transfer"}


def test_empty_corpus_rejected(tiny_bundle, trainer):
    with pytest.raises(ConfigError):
        alternate_train(trainer, None, tiny_bundle.get("A", "train"), ScheduleSpec(1, 1, 1), AblationFlags())


def test_validation_tracks_best(tiny_bundle, trainer):
    rep = alternate_train(
        trainer,
        tiny_bundle.get("A", "textbook"),
        tiny_bundle.get("A", "train"),
        ScheduleSpec(1, 1, 2),
        AblationFlags(),
        val=tiny_bundle.get("A", "val"),
        vocab=tiny_bundle.vocab,
    )
    assert len(rep.epochs) == 2 and rep.best_epoch in (0, 1)
    assert rep.best_cider == max(r["CIDEr-D"] for r in rep.epochs)
    assert "CIDEr-D" in rep.summary_table()


def test_evaluate_ground_truth_sanity(tiny_bundle, trainer):
    res = evaluate(trainer.model, tiny_bundle.get("A", "val"), tiny_bundle.vocab)
    assert len(res.candidates) == len(tiny_bundle.get("A", "val"))
    assert res.probs.shape == (len(res.candidates), 4)
    assert {"BLEU-4", "ROUGE-L", "CIDEr-D", "f1", "loss"} <= set(res.metrics)


# -- corpus transfer -----------------------------------------------------------------------

def _stages(bundle, epochs_b):
    a = StageSpec(bundle.get("A", "textbook"), bundle.get("A", "train"), None, ScheduleSpec(1, 1, 1), lr=1e-3)
    b = StageSpec(bundle.get("B", "textbook"), bundle.get("B", "train"), None, ScheduleSpec(1, 1, epochs_b), lr=1e-3)
    return a, b


def test_stage_b_with_zero_epochs_keeps_stage_a_weights(tiny_bundle):
    a, b = _stages(tiny_bundle, 0)
    factory = lambda: build_model(CFG, tiny_bundle)  # noqa: E731
    tr, rep_a, rep_b = transfer_between_corpora(factory, a, b, AblationFlags(transfer_learning=True), OptimConfig(), seed=0)
    solo = Trainer(factory(), OptimConfig(lr=1e-3, patch_lr=1e-6), seed=0)
    alternate_train(solo, a.pretrain, a.transfer, a.schedule, AblationFlags())
    assert digest(tr.model.state_dict()) == digest(solo.model.state_dict())
    assert rep_a is not None and rep_b.epochs == []


def test_tls_off_skips_stage_a(tiny_bundle):
    a, b = _stages(tiny_bundle, 1)
    seen = []
    _, rep_a, rep_b = transfer_between_corpora(
        lambda: build_model(CFG, tiny_bundle), a, b, AblationFlags(), OptimConfig(), seed=0, event_sink=seen.append
    )
    assert rep_a is None and len(rep_b.epochs) == 1
    assert {e["corpus"] for e in seen} == {"B"}


def test_tls_on_tags_both_stages(tiny_bundle):
    a, b = _stages(tiny_bundle, 1)
    seen = []
    transfer_between_corpora(
        lambda: build_model(CFG, tiny_bundle), a, b, AblationFlags(transfer_learning=True), OptimConfig(), event_sink=seen.append
    )
    starts = [e for e in seen if e["event"] == "stage_start"]
    assert [e["stage"] for e in starts] == ["A", "B"]


def test_incompatible_corpora_rejected(tiny_bundle):
    import dataclasses

    a, b = _stages(tiny_bundle, 1)
    other = dataclasses.replace(b.transfer, terminology_names=list(reversed(b.transfer.terminology_names)))
    with pytest.raises(ConfigError, match="terminology"):
        check_compatible(a, dataclasses.replace(b, transfer=other))
    other = dataclasses.replace(b.transfer, vocab_sha256="0" * 64)
    with pytest.raises(ConfigError, match="vocabulary"):
        check_compatible(a, dataclasses.replace(b, transfer=other))


# -- checkpoints -------------------------------------------------------------------------------

def _trained(bundle, epochs=1, seed=0):
    tr = Trainer(build_model(CFG, bundle), OptimConfig(), seed=seed)
    alternate_train(tr, bundle.get("A", "textbook"), bundle.get("A", "train"), ScheduleSpec(1, 1, epochs), AblationFlags())
    return tr


def test_checkpoint_save_load_save_identical(tmp_path, tiny_bundle):
    tr = _trained(tiny_bundle)
    h1 = save_checkpoint(tmp_path / "a.agck", tr, provenance={"seed": 0})
    restored = load_checkpoint(tmp_path / "a.agck").restore()
    h2 = save_checkpoint(tmp_path / "b.agck", restored, provenance={"seed": 0})
    assert h1 == h2
    assert (tmp_path / "a.agck").read_bytes() == (tmp_path / "b.agck").read_bytes()


def test_resume_is_bitwise_identical(tmp_path, tiny_bundle):
    sched = ScheduleSpec(1, 1, 3)
    full = Trainer(build_model(CFG, tiny_bundle), OptimConfig(), seed=0)
    alternate_train(full, tiny_bundle.get("A", "textbook"), tiny_bundle.get("A", "train"), sched, AblationFlags())

    part = Trainer(build_model(CFG, tiny_bundle), OptimConfig(), seed=0)
    alternate_train(part, tiny_bundle.get("A", "textbook"), tiny_bundle.get("A", "train"), ScheduleSpec(1, 1, 1), AblationFlags())
    save_checkpoint(tmp_path / "mid.agck", part)
    resumed = load_checkpoint(tmp_path / "mid.agck").restore()
    alternate_train(resumed, tiny_bundle.get("A", "textbook"), tiny_bundle.get("A", "train"), sched, AblationFlags())

    a, b = full.model.state_dict(), resumed.model.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    full_losses = [e["loss"] for e in full.events if e["event"] == "step"]
    resumed_losses = [e["loss"] for e in resumed.events if e["event"] == "step"]
    assert full_losses[-len(resumed_losses) :] == resumed_losses
    assert full.global_step == resumed.global_step
    for k in full.state.first_moment:
        assert np.array_equal(full.state.second_moment[k], resumed.state.second_moment[k])


def test_float64_checkpoint_roundtrip(tmp_path, tiny_bundle):
    tr = _trained(tiny_bundle)
    tr.model.astype(np.float64)
    save_checkpoint(tmp_path / "d.agck", tr)
    ck = load_checkpoint(tmp_path / "d.agck")
    assert ck.dtype == "<f8"
    np.testing.assert_array_equal(ck.params["decoder.final_norm.gain"], tr.model.decoder.final_norm.gain.data)


def test_truncated_checkpoint_rejected_without_mutation(tmp_path, tiny_bundle):
    tr = _trained(tiny_bundle)
    save_checkpoint(tmp_path / "a.agck", tr)
    buf = (tmp_path / "a.agck").read_bytes()
    target = Trainer(build_model(CFG, tiny_bundle), OptimConfig(), seed=1)
    before = digest(target.model.state_dict())
    for cut in (10, len(buf) // 2, len(buf) - 1):
        with pytest.raises(CorruptFileError):
            Checkpoint.from_bytes(buf[:cut])
    assert digest(target.model.state_dict()) == before


def test_checkpoint_error_kinds(tmp_path, tiny_bundle):
    tr = _trained(tiny_bundle)
    buf = Checkpoint.from_trainer(tr).to_bytes()
    with pytest.raises(VersionMismatchError):
        Checkpoint.from_bytes(buf[:4] + (7).to_bytes(4, "little") + buf[8:])
    flipped = bytearray(buf)
    flipped[-100] ^= 0xFF
    with pytest.raises(HashMismatchError):
        Checkpoint.from_bytes(bytes(flipped))
    with pytest.raises(CorruptFileError):
        Checkpoint.from_bytes(b"NOPE" + buf[4:])


def test_shape_mismatch_rejected_without_mutation(tiny_bundle):
    ck = Checkpoint.from_trainer(_trained(tiny_bundle))
    bigger = tiny_run_config(**{"model.d_model": "32"})
    target = Trainer(build_model(bigger, tiny_bundle), OptimConfig(), seed=0)
    before = digest(target.model.state_dict())
    with pytest.raises(ShapeMismatchError):
        ck.apply(target)
    assert digest(target.model.state_dict()) == before
    assert target.global_step == 0


def test_apply_into_existing_trainer(tiny_bundle):
    src = _trained(tiny_bundle)
    dst = Trainer(build_model(CFG, tiny_bundle), OptimConfig(), seed=9)
    Checkpoint.from_trainer(src).apply(dst)
    assert digest(dst.model.state_dict()) == digest(src.model.state_dict())
    assert dst.global_step == src.global_step and dst.epoch == src.epoch
    assert dst.rng.bit_generator.state == src.rng.bit_generator.state
    assert math.isclose(dst.state.learning_rate, src.state.learning_rate)
