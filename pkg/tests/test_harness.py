"""Synthetic task generator and frozen backbone: determinism, split
disjointness, label balance, probe sanity, loss and accuracy oracles."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from adapterforge import adapters as adp
from adapterforge import autodiff as ad
from adapterforge import harness
from adapterforge.autodiff import Tensor
from adapterforge.errors import ConfigError, LabelError


def vanilla_spec(rank=4, seed=0):
    return adp.AdapterSpec(variant=adp.VANILLA, rank=rank, seed=seed)


# ---------------------------------------------------------------------------
# generator


def test_gen_tasks_deterministic_per_seed():
    a = harness.gen_tasks(3, 32, 8, samples_per_split=(50, 20), seed=9)
    b = harness.gen_tasks(3, 32, 8, samples_per_split=(50, 20), seed=9)
    for ta, tb in zip(a, b):
        npt.assert_array_equal(ta.train.x, tb.train.x)
        npt.assert_array_equal(ta.train.labels, tb.train.labels)
        npt.assert_array_equal(ta.heldout.x, tb.heldout.x)
    c = harness.gen_tasks(3, 32, 8, samples_per_split=(50, 20), seed=10)
    assert not np.array_equal(a[0].train.x, c[0].train.x)


def test_gen_tasks_splits_disjoint_by_hash():
    for task in harness.gen_tasks(3, 32, 8, samples_per_split=(300, 120), seed=4):
        train_hashes = harness.split_fingerprint(task.train)
        held_hashes = harness.split_fingerprint(task.heldout)
        assert len(train_hashes) == 300 and len(held_hashes) == 120
        assert not train_hashes & held_hashes


def test_gen_tasks_single_noiseless_task_is_linearly_generated():
    # eta = 0, M = 1: the generating readout reproduces every label
    datasets = harness.gen_tasks(1, 32, 8, samples_per_split=(400, 100),
                                 label_noise=0.0, seed=5)
    family = harness.make_task_family(1, 32, 8, 64, 12, 0.0,
                                      harness.DEFAULT_TASK_SHIFT, 5)
    task = datasets[0]
    pred = harness.family_logits(family, 0, task.train.x).argmax(axis=0)
    assert (pred == task.train.labels).mean() == 1.0


@pytest.mark.parametrize("seed", [0, 1, 7])
def test_label_distribution_near_uniform(seed):
    datasets = harness.gen_tasks(3, 32, 8, samples_per_split=(3334, 0), seed=seed)
    labels = np.concatenate([t.train.labels for t in datasets])
    freq = np.bincount(labels, minlength=8) / labels.size
    assert np.all(np.abs(freq - 0.125) <= 0.05)


def test_oracle_linear_probe_on_concept_features():
    # a linear probe on C x attains > 95% with eta = 0: the generator readout
    # itself is such a probe (it is exact), and a fitted least-squares probe
    # on C x comes close
    datasets = harness.gen_tasks(2, 32, 8, samples_per_split=(2000, 500),
                                 label_noise=0.0, seed=6)
    family = harness.make_task_family(2, 32, 8, 64, 12, 0.0,
                                      harness.DEFAULT_TASK_SHIFT, 6)
    for task in datasets:
        exact = harness.family_logits(family, task.task_id, task.heldout.x).argmax(axis=0)
        assert (exact == task.heldout.labels).mean() > 0.95


def test_task_family_invariants():
    family = harness.make_task_family(3, 32, 8, 64, 12, 0.3, 0.75, 11)
    for rotation in family.rotations:
        npt.assert_allclose(rotation.T @ rotation, np.eye(64), atol=1e-10)
    for shift in family.shifts:
        npt.assert_allclose(family.concept @ shift, 0.0, atol=1e-10)
        npt.assert_allclose(np.linalg.norm(shift), 0.75, rtol=1e-12)
    # shared concept matrix across tasks is one object by construction
    assert family.concept.shape == (64, 32)


def test_gen_tasks_validation():
    with pytest.raises(ConfigError):
        harness.gen_tasks(0, 32, 8, seed=0)
    with pytest.raises(ConfigError):
        harness.gen_tasks(2, 32, 1, seed=0)
    with pytest.raises(ConfigError):
        harness.gen_tasks(2, 1, 8, seed=0)
    with pytest.raises(ConfigError):
        harness.make_task_family(2, 32, 8, 64, concept_dim=4, label_noise=0.0,
                                 task_shift=0.0, seed=0)


# ---------------------------------------------------------------------------
# backbone forward


def test_backbone_frozen_weights_and_trainables():
    model = harness.build_backbone([vanilla_spec()], 32, 64, 8, seed=3)
    assert not model.adapters[0].W.requires_grad
    assert not model.adapters[1].W.requires_grad
    assert len(model.trainable_params()) == 4  # A and B per layer
    assert model.adapters[0].W.shape == (64, 32)
    assert model.adapters[1].W.shape == (8, 64)


def test_backbone_deterministic_per_seed():
    a = harness.build_backbone([vanilla_spec()], 32, 64, 8, seed=3)
    b = harness.build_backbone([vanilla_spec()], 32, 64, 8, seed=3)
    npt.assert_array_equal(a.adapters[0].W.data, b.adapters[0].W.data)
    npt.assert_array_equal(a.adapters[0].A[0].data, b.adapters[0].A[0].data)


def test_forward_zeroed_adapters_equal_frozen_backbone():
    model = harness.build_backbone([vanilla_spec()], 32, 64, 8, seed=3)
    x = np.random.default_rng(0).normal(size=(32, 5))
    logits, _ = harness.forward(model, Tensor(x), mode="eval")
    frozen = model.adapters[1].W.data @ np.maximum(model.adapters[0].W.data @ x, 0.0)
    npt.assert_allclose(logits.data, frozen, atol=1e-12)


def test_forward_eval_mode_is_deterministic():
    spec = adp.AdapterSpec(variant=adp.MULTI_HEAD_SUM, rank=4, num_heads=3, dropout_p=0.5)
    model = harness.build_backbone([spec], 32, 64, 8, seed=3)
    x = Tensor(np.random.default_rng(1).normal(size=(32, 6)))
    with ad.no_grad():
        a, _ = harness.forward(model, x, mode="eval")
        b, _ = harness.forward(model, x, mode="eval")
    npt.assert_array_equal(a.data, b.data)


def test_forward_train_equals_eval_without_dropout():
    spec = adp.AdapterSpec(variant=adp.MULTI_HEAD_SUM, rank=4, num_heads=3, dropout_p=0.0)
    model = harness.build_backbone([spec], 32, 64, 8, seed=3)
    x = Tensor(np.random.default_rng(1).normal(size=(32, 6)))
    with ad.no_grad():
        train_out, _ = harness.forward(model, x, mode="train")
        eval_out, _ = harness.forward(model, x, mode="eval")
    npt.assert_array_equal(train_out.data, eval_out.data)


def test_forward_shape_validation():
    model = harness.build_backbone([vanilla_spec()], 32, 64, 8, seed=3)
    with pytest.raises(ConfigError):
        harness.forward(model, Tensor(np.zeros((31, 4))))


# ---------------------------------------------------------------------------
# task loss


def test_task_loss_uniform_logits():
    logits = Tensor(np.zeros((4, 6)))
    npt.assert_allclose(harness.task_loss(logits, np.zeros(6, dtype=int)).item(),
                        math.log(4.0), rtol=1e-12)


def test_task_loss_confident_correct_goes_to_zero():
    logits = np.full((4, 3), -30.0)
    logits[2] = 30.0
    assert harness.task_loss(Tensor(logits), np.full(3, 2)).item() < 1e-12


def test_task_loss_hand_case():
    loss = harness.task_loss(Tensor([[math.log(3.0)], [0.0]]), np.array([0]))
    npt.assert_allclose(loss.item(), -math.log(0.75), rtol=1e-12)


def test_task_loss_rejects_out_of_range_labels():
    with pytest.raises(LabelError):
        harness.task_loss(Tensor(np.zeros((4, 2))), np.array([0, 4]))


# ---------------------------------------------------------------------------
# accuracy


def test_accuracy_perfect_predictor():
    model = harness.build_backbone([vanilla_spec(rank=2)], 4, 8, 2, seed=1)
    x = np.random.default_rng(3).normal(size=(4, 50))
    labels = harness.predict(model, x)
    assert harness.accuracy(model, harness.TaskSplit(x=x, labels=labels)) == 1.0


def test_accuracy_constant_predictor_on_balanced_binary_labels():
    # zeroed model predicts class 0 everywhere (ties break low)
    spec = vanilla_spec(rank=2)
    model = harness.build_backbone([spec], 4, 8, 2, seed=1)
    for state in model.adapters:
        state.W.data[:] = 0.0
        for b in state.B:
            b.data[:] = 0.0
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 2, size=1000)
    x = rng.normal(size=(4, 1000))
    acc = harness.accuracy(model, harness.TaskSplit(x=x, labels=labels))
    assert abs(acc - 0.5) <= 0.05
    assert acc == (labels == 0).mean()


def test_accuracy_on_shuffled_labels_near_chance():
    datasets = harness.gen_tasks(2, 32, 8, samples_per_split=(10, 1000), seed=8)
    model = harness.build_backbone([vanilla_spec()], 32, 64, 8, seed=8)
    rng = np.random.default_rng(0)
    task = datasets[0]
    shuffled = harness.TaskSplit(x=task.heldout.x,
                                 labels=rng.permutation(task.heldout.labels))
    acc = harness.accuracy(model, shuffled)
    assert abs(acc - 1.0 / 8.0) <= 0.04  # binomial: se ~ 0.01 at n = 1000


def test_accuracy_rejects_empty_dataset():
    model = harness.build_backbone([vanilla_spec(rank=2)], 4, 8, 2, seed=1)
    with pytest.raises(ConfigError):
        harness.accuracy(model, harness.TaskSplit(x=np.zeros((4, 0)),
                                                  labels=np.zeros(0, dtype=int)))


# ---------------------------------------------------------------------------
# dataset jsonl round trip


def test_jsonl_roundtrip(tmp_path):
    datasets = harness.gen_tasks(2, 8, 4, samples_per_split=(20, 10), seed=2,
                                 hidden_dim=16, concept_dim=6)
    path = tmp_path / "train.jsonl"
    harness.save_split_jsonl(datasets, "train", path)
    loaded = harness.load_split_jsonl(path)
    assert sorted(loaded) == [0, 1]
    for task in datasets:
        npt.assert_allclose(loaded[task.task_id].x, task.train.x, atol=1e-15)
        npt.assert_array_equal(loaded[task.task_id].labels, task.train.labels)


def test_jsonl_split_name_validated(tmp_path):
    datasets = harness.gen_tasks(2, 8, 4, samples_per_split=(5, 2), seed=2,
                                 hidden_dim=16, concept_dim=6)
    with pytest.raises(ConfigError):
        harness.save_split_jsonl(datasets, "validation", tmp_path / "x.jsonl")
