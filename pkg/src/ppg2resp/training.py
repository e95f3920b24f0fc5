"""Mini-batch MSE training, leave-one-subject-out folds, transfer retraining.

Everything here is bit-for-bit reproducible: shuffling and dropout draw from
separate substreams of the run seed, and each fold derives its own seed from
(run seed, fold index), so results do not depend on execution order or on
how many folds run.
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import data as data_mod
from . import model as model_mod
from . import nncore
from .errors import DatasetError, ParameterError, ShapeError, TrainingError


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    dropout_keep: float = 0.5
    input_norm: str = "zscore"

    def validate(self):
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if not (0 < self.dropout_keep <= 1):
            raise ParameterError(
                f"dropout_keep must be in (0, 1], got {self.dropout_keep}"
            )
        if self.input_norm not in ("zscore", "minmax", "raw"):
            raise ParameterError(
                f"unknown input normalization mode {self.input_norm!r}"
            )


@dataclass
class FoldResult:
    held_out_subject: str
    model: object
    loss_history: list
    wall_clock_s: float
    train_subjects: list


def train(model, segments, config):
    """Optimize ``model`` in place on SegmentPairs; returns (model, loss_history).

    One loss_history entry per epoch: the sample-weighted mean batch MSE.
    Batches follow a fresh Fisher-Yates shuffle each epoch; the last batch
    may be short. Aborts on the first non-finite loss or gradient.
    """
    config.validate()
    if not segments:
        raise TrainingError("no training segments")
    window_len = model.config.window_len
    if any(len(p.input) != window_len for p in segments):
        raise ShapeError(
            f"segment length does not match model window {window_len}"
        )
    X = np.stack([p.input for p in segments])[:, None, :]
    Y = np.stack([p.target for p in segments])[:, None, :]
    shuffle_ss, dropout_ss = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)
    model.config = replace(model.config, dropout_keep=config.dropout_keep)
    if model.adam is None:
        model.adam = [
            nncore.adam_init(tensor) for _, tensor in model.parameter_tensors()
        ]
    n = len(segments)
    history = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        sse = 0.0
        for batch_idx, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            out, _, cache = model_mod.forward_batch(
                model, X[idx], training=True, rng=dropout_rng, keep_cache=True
            )
            loss, grad = nncore.mse_loss(out, Y[idx])
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {batch_idx}"
                )
            sse += loss * len(idx)
            grads = model_mod.backward_batch(model, cache, grad)
            tensors = model.parameter_tensors()
            flat_grads = [g for gw, gb in grads for g in (gw, gb)]
            for (label, tensor), g, state in zip(tensors, flat_grads, model.adam):
                nncore.adam_step(
                    tensor, g, state, config.learning_rate, param_label=label
                )
        history.append(sse / n)
    return model, history


def training_segments(recordings, input_norm="zscore"):
    segments = []
    for rec in recordings:
        segments.extend(data_mod.segment_training(rec, input_norm=input_norm))
    return segments


def fold_seed(base_seed, fold_idx):
    """Stable per-fold seed; folds can run in any order or in parallel."""
    return int(
        np.random.SeedSequence([base_seed, fold_idx]).generate_state(1)[0]
    )


def _run_fold(args):
    recordings, held_out_idx, config, base_model, model_config = args
    held_out = recordings[held_out_idx]
    train_recs = [r for i, r in enumerate(recordings) if i != held_out_idx]
    seed = fold_seed(config.seed, held_out_idx)
    fold_config = replace(config, seed=seed)
    if base_model is not None:
        model = base_model.copy()
        model.adam = None  # transfer starts with fresh optimizer state
    else:
        model = model_mod.build_model(model_config, rng_seed=seed)
    segments = training_segments(train_recs, input_norm=config.input_norm)
    if any(p.subject_id == held_out.subject_id for p in segments):
        raise DatasetError(
            f"held-out subject {held_out.subject_id} leaked into training segments"
        )
    t0 = time.perf_counter()
    model, history = train(model, segments, fold_config)
    wall = time.perf_counter() - t0
    return FoldResult(
        held_out_subject=held_out.subject_id,
        model=model,
        loss_history=history,
        wall_clock_s=wall,
        train_subjects=[r.subject_id for r in train_recs],
    )


def loso_cv(recordings, config, jobs=1, base_model=None, model_config=None):
    """One fold per subject, each trained without that subject.

    Subjects are ordered by id so fold indexing is stable. ``base_model``
    switches every fold to transfer retraining from those weights instead of
    a fresh initialization.
    """
    if len(recordings) < 2:
        raise DatasetError("leave-one-subject-out needs at least 2 subjects")
    ids = [r.subject_id for r in recordings]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DatasetError(f"duplicate subject ids: {dup}")
    recordings = sorted(recordings, key=lambda r: r.subject_id)
    jobs = max(1, jobs)
    tasks = [
        (recordings, i, config, base_model, model_config)
        for i in range(len(recordings))
    ]
    if jobs == 1:
        return [_run_fold(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_fold, tasks))


def transfer_retrain(pretrained, recordings, config, reset_adam=True):
    """Continue optimizing pretrained weights on a new dataset's segments."""
    model = pretrained.copy()
    if reset_adam:
        model.adam = None
    segments = training_segments(recordings, input_norm=config.input_norm)
    model, history = train(model, segments, config)
    return model, history
