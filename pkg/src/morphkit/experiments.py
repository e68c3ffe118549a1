"""Experiment recipes shared by the CLI and the acceptance tests.

Every recipe takes a base seed and derives one independent seed triple per
restart (sample selection, parameter init, shuffling), so restart ``r`` is
reproducible on its own.  Results are plain JSON-ready dicts.
"""

from __future__ import annotations

import logging
from typing import Any

import numpy as np

from .datasets import builtin_se, load_mnist, make_pairs, split_scgs
from .grid import DomainError, taxicab
from .layers import build_adaptive, build_residual_mnn, build_stacked, init_states
from .soft import Form, Kind, MorphMode, StructuringElement, smooth_sign
from .training import (TrainConfig, TrainingDiverged, accuracy, binarize_se, decide_operation, offset_aligned_taxicab,
                       se_exact_match, train)

log = logging.getLogger(__name__)

DEFAULT_LR = {
    "binary": 7.5,
    "gray-dilate": 1.0,
    "gray-erode": 0.5,
    "compound": 10.0,
    "adaptive": 10.0,
    "classifier": 1e-4,
}
DEFAULT_BATCH = 64

# SE-learning forms as named on the command line
FORMS = {"binary": Form.PRODUCT, "gray": Form.ADDITIVE}
GRAY_DEFAULT = {MorphMode.DILATE: "gray3-dilate", MorphMode.ERODE: "gray3-erode"}


def default_lr(form: str, op: str) -> float:
    if form == "binary":
        return DEFAULT_LR["binary"]
    return DEFAULT_LR[f"gray-{MorphMode(op).value}"]


def restart_seeds(seed: int, restart: int) -> tuple[int, int, int]:
    """(sample, init, shuffle) seeds for one restart."""
    a, b, c = np.random.SeedSequence([seed, restart]).generate_state(3)
    return int(a), int(b), int(c)


def pick_images(images: np.ndarray, count: int | None, seed: int) -> np.ndarray:
    if count is None or count >= len(images):
        return images
    idx = np.sort(np.random.default_rng(seed).choice(len(images), count, replace=False))
    return images[idx]


def resolve_se(se: StructuringElement | str) -> StructuringElement:
    return builtin_se(se) if isinstance(se, str) else se


def _run(spec, states, pairs, cfg, workers_pool=None) -> dict[str, Any]:
    try:
        rep = train(spec, states, pairs.inputs, pairs.targets, cfg, pool=workers_pool)
    except TrainingDiverged as exc:
        log.warning("restart diverged: %s", exc)
        return {"diverged": True, "error": str(exc)}
    return {"diverged": False, "initial_loss": rep.initial_loss, "final_loss": rep.final_loss,
            "epoch_losses": rep.epoch_losses}


def _mean(values) -> float | None:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def learn_se(images, se: StructuringElement | str, op: str, form: str = "binary", *, epochs: int = 20,
             lr: float | None = None, batch: int = DEFAULT_BATCH, restarts: int = 10, n_pairs: int | None = 2000,
             seed: int = 0, workers: int = 1, erosion_variant: str = "corrected") -> dict[str, Any]:
    """Train a single-filter layer on hard-morphology targets and compare the learned SE to the truth."""
    if form not in FORMS:
        raise DomainError(f"unknown form {form!r}; expected one of {sorted(FORMS)}")
    op = MorphMode(op)
    truth = resolve_se(se)
    lr = default_lr(form, op.value) if lr is None else lr
    runs = []
    for r in range(restarts):
        s_pick, s_init, s_train = restart_seeds(seed, r)
        pairs = make_pairs(pick_images(images, n_pairs, s_pick), [(op, truth)])
        spec = build_stacked([op], truth.weights.shape, pairs.inputs.shape[1:], FORMS[form].value, erosion_variant)
        states = init_states(spec, s_init)
        cfg = TrainConfig(lr, batch, epochs, seed=s_train, workers=workers)
        out = {"restart": r, **_run(spec, states, pairs, cfg)}
        learned = states[0]["weights"][0]
        out["learned"] = learned.tolist()
        out["taxicab"] = taxicab(learned, truth.weights)
        out["aligned_taxicab"] = offset_aligned_taxicab(learned, truth.weights)
        if truth.kind is Kind.FLAT:
            binary = binarize_se(learned)
            out["binarized"] = binary.tolist()
            out["exact_match"] = (not out["diverged"]) and se_exact_match(binary, truth.weights != 0)
        runs.append(out)
    ok = [x for x in runs if not x["diverged"]]
    summary = {
        "restarts": restarts,
        "diverged": restarts - len(ok),
        "mean_taxicab": _mean(x["taxicab"] for x in ok),
        "mean_aligned_taxicab": _mean(x["aligned_taxicab"] for x in ok),
        "mean_final_loss": _mean(x["final_loss"] for x in ok),
        "max_final_loss": max((x["final_loss"] for x in ok), default=None),
    }
    if truth.kind is Kind.FLAT:
        summary["matches"] = sum(bool(x["exact_match"]) for x in runs)
        summary["accuracy"] = summary["matches"] / restarts
    return {"config": {"op": op.value, "form": form, "epochs": epochs, "lr": lr, "batch": batch,
                       "restarts": restarts, "n_pairs": n_pairs, "seed": seed, "truth": truth.weights.tolist()},
            "runs": runs, "summary": summary}


def detect_op(images, op: str, smooth: str = "tanh", se: StructuringElement | str = "diamond3", *,
              epochs: int = 20, lr: float = DEFAULT_LR["adaptive"], batch: int = DEFAULT_BATCH, restarts: int = 1,
              n_pairs: int | None = 2000, seed: int = 0, workers: int = 1, form: str = "product") -> dict[str, Any]:
    """Train an adaptive layer on dilated or eroded targets and read the operation off its gate."""
    op = MorphMode(op)
    truth = resolve_se(se)
    expected = "dilation" if op is MorphMode.DILATE else "erosion"
    runs = []
    for r in range(restarts):
        s_pick, s_init, s_train = restart_seeds(seed, r)
        pairs = make_pairs(pick_images(images, n_pairs, s_pick), [(op, truth)])
        spec = build_adaptive(truth.weights.shape, pairs.inputs.shape[1:], smooth, form)
        states = init_states(spec, s_init)
        a0 = float(states[0]["gate"][0])
        cfg = TrainConfig(lr, batch, epochs, seed=s_train, smooth=smooth, workers=workers)
        out = {"restart": r, "initial_a": a0, **_run(spec, states, pairs, cfg)}
        a = float(states[0]["gate"][0])
        decision = decide_operation(a, smooth).value if np.isfinite(a) else "undecided"
        out.update(final_a=a, smooth_value=float(smooth_sign(a, smooth)), decision=decision,
                   correct=(not out["diverged"]) and decision == expected)
        runs.append(out)
    ok = [x for x in runs if not x["diverged"]]
    summary = {
        "restarts": restarts,
        "expected": expected,
        "correct": sum(x["correct"] for x in runs),
        "accuracy": sum(x["correct"] for x in runs) / restarts,
        "diverged": restarts - len(ok),
        "mean_final_loss": _mean(x["final_loss"] for x in ok),
        "max_final_loss": max((x["final_loss"] for x in ok), default=None),
    }
    return {"config": {"op": op.value, "smooth": smooth, "epochs": epochs, "lr": lr, "batch": batch,
                       "restarts": restarts, "n_pairs": n_pairs, "seed": seed, "form": form},
            "runs": runs, "summary": summary}


COMPOUNDS = {
    "opening": (MorphMode.ERODE, MorphMode.DILATE),
    "closing": (MorphMode.DILATE, MorphMode.ERODE),
}


def learn_compound(images, kind: str, se: StructuringElement | str = "diamond3", *, epochs: int = 20,
                   lr: float = DEFAULT_LR["compound"], batch: int = DEFAULT_BATCH, restarts: int = 1,
                   n_pairs: int | None = 2000, seed: int = 0, workers: int = 1,
                   form: str = "product") -> dict[str, Any]:
    """Two stacked single-filter layers trained on opened or closed targets."""
    if kind not in COMPOUNDS:
        raise DomainError(f"unknown compound {kind!r}; expected one of {sorted(COMPOUNDS)}")
    ops = COMPOUNDS[kind]
    truth = resolve_se(se)
    runs = []
    for r in range(restarts):
        s_pick, s_init, s_train = restart_seeds(seed, r)
        pairs = make_pairs(pick_images(images, n_pairs, s_pick), [(o, truth) for o in ops])
        spec = build_stacked(ops, truth.weights.shape, pairs.inputs.shape[1:], form)
        states = init_states(spec, s_init)
        cfg = TrainConfig(lr, batch, epochs, seed=s_train, workers=workers)
        out = {"restart": r, **_run(spec, states, pairs, cfg)}
        out["learned"] = [st["weights"][0].tolist() for st in states]
        runs.append(out)
    ok = [x for x in runs if not x["diverged"]]
    summary = {
        "restarts": restarts,
        "diverged": restarts - len(ok),
        "mean_final_loss": _mean(x["final_loss"] for x in ok),
        "max_final_loss": max((x["final_loss"] for x in ok), default=None),
    }
    return {"config": {"kind": kind, "epochs": epochs, "lr": lr, "batch": batch, "restarts": restarts,
                       "n_pairs": n_pairs, "seed": seed, "form": form, "se": truth.weights.tolist()},
            "runs": runs, "summary": summary}


def classifier_data(dataset: str, n_train: int, n_test: int, seed: int = 0, mnist_dir=None, size: int = 64):
    """``(train, test)`` labelled sets for the classifier recipe."""
    if dataset == "scgs":
        return split_scgs(n_train, n_test, size, seed)
    if dataset == "mnist":
        tr, te = load_mnist(mnist_dir, "train"), load_mnist(mnist_dir, "test")
        return tr.subset(np.arange(min(n_train, len(tr)))), te.subset(np.arange(min(n_test, len(te))))
    raise DomainError(f"unknown dataset {dataset!r}; expected 'scgs' or 'mnist'")


def train_classifier(train_set, test_set, profile, *, filters: int = 1, epochs: int = 100,
                     lr: float = DEFAULT_LR["classifier"], batch: int = DEFAULT_BATCH, seed: int = 0,
                     workers: int = 1, form: str = "product", dropout: float | None = None,
                     eval_every: int = 0, target_accuracy: float | None = None):
    """Residual MNN trained with cross-entropy; returns ``(report, spec, states)``.

    With ``eval_every`` the test accuracy is recorded every that many epochs,
    and training stops early once it reaches ``target_accuracy``.
    """
    spec = build_residual_mnn(profile, filters, form, dropout)
    if train_set.images.shape[1:] != spec.input_shape[1:]:
        raise DomainError(f"images {train_set.images.shape[1:]} do not fit profile {profile!r} "
                          f"({spec.input_shape[1:]})")
    states = init_states(spec, seed)
    test_x = test_set.images[:, None]
    history = []
    losses: list[float] = []
    done = 0
    chunk = eval_every or epochs
    while done < epochs:
        step = min(chunk, epochs - done)
        # shuffling is keyed by seed + epoch, so chunked runs match a single long run
        cfg = TrainConfig(lr, batch, step, loss="cross_entropy", seed=seed + done, workers=workers)
        losses += train(spec, states, train_set.images, train_set.labels, cfg).epoch_losses
        done += step
        if eval_every:
            acc = accuracy(spec, states, test_x, test_set.labels)
            history.append({"epoch": done, "test_accuracy": acc})
            log.info("epoch %d test accuracy %.4f", done, acc)
            if target_accuracy is not None and acc >= target_accuracy:
                break
    report = {
        "config": {"profile": profile if isinstance(profile, str) else dict(profile), "filters": filters,
                   "epochs": epochs, "lr": lr, "batch": batch, "seed": seed, "form": form, "dropout": dropout,
                   "n_train": len(train_set.labels), "n_test": len(test_set.labels)},
        "epochs_run": done,
        "epoch_losses": losses,
        "history": history,
        "train_accuracy": accuracy(spec, states, train_set.images[:, None], train_set.labels),
        "test_accuracy": accuracy(spec, states, test_x, test_set.labels),
    }
    return report, spec, states


# -- gradient check over every layer kind -----------------------------------

GRADCHECK_LIMIT = 1e-4


def gradcheck_cases(size: int):
    """Name -> (network, loss, training flag) covering every layer kind."""
    img = (size, size)
    tiny = {"input": img, "fc": (6, 5), "classes": 3}
    return {
        "binary-dilate": (build_stacked(["dilate"], (3, 3), img, "product"), "mse", False),
        "binary-erode": (build_stacked(["erode"], (3, 3), img, "product"), "mse", False),
        "gray-dilate": (build_stacked(["dilate"], (3, 3), img, "additive"), "mse", False),
        "gray-erode": (build_stacked(["erode"], (3, 3), img, "additive"), "mse", False),
        "gray-erode-verbatim": (build_stacked(["erode"], (3, 3), img, "additive", "verbatim"), "mse", False),
        "adaptive-tanh": (build_adaptive((3, 3), img, "tanh"), "mse", False),
        "adaptive-softsign": (build_adaptive((3, 3), img, "softsign"), "mse", False),
        "adaptive-additive": (build_adaptive((3, 3), img, "tanh", "additive"), "mse", False),
        "opening": (build_stacked(["erode", "dilate"], (3, 3), img), "mse", False),
        "closing": (build_stacked(["dilate", "erode"], (3, 3), img), "mse", False),
        "three-layer": (build_stacked(["dilate", "erode", "dilate"], (2, 3), img, "additive"), "mse", False),
        "residual-cross-entropy": (build_residual_mnn(tiny, 2), "cross_entropy", False),
        "residual-softmax-mse": (build_residual_mnn(tiny, 1), "mse", False),
        "residual-dropout": (build_residual_mnn(tiny, 1, dropout=0.5), "cross_entropy", True),
    }


def gradcheck_suite(seed: int = 0, size: int = 8, batch: int = 2) -> dict[str, dict[str, float]]:
    """Per-tensor worst relative gradient error for a network of every layer kind."""
    from .training import finite_diff_check

    out = {}
    for i, (name, (spec, loss, training)) in enumerate(gradcheck_cases(size).items()):
        rng = np.random.default_rng([seed, i])
        states = init_states(spec, rng)
        x = rng.random((batch,) + spec.input_shape)
        if loss == "mse":
            target = rng.random((batch,) + spec.output_shape)
        else:
            target = rng.integers(0, spec.output_shape[0], batch)
        out[name] = finite_diff_check(spec, states, (x, target), loss, seed=seed, training=training,
                                      per_tensor=True)
    return out
