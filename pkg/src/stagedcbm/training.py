"""Shared deterministic training loop with best-validation selection."""

from __future__ import annotations

import copy

import numpy as np

from . import autodiff as ad
from .autodiff import backward
from .optim import AdamW, NanGradient, PlateauSchedule


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the last good state."""

    def __init__(self, epoch, state):
        self.epoch = epoch
        self.state = state
        super().__init__(f"training diverged at epoch {epoch}")


def run_training(model, train_indices, step_fn, val_fn, *, epochs, batch_size,
                 lr, weight_decay, seed, lr_patience=10, log=None):
    """Mini-batch AdamW over ``train_indices`` with plateau lr decay.

    ``step_fn(batch_indices)`` returns the scalar loss tensor for one batch;
    ``val_fn()`` returns the validation loss as a float.  The model ends up
    holding the parameters of its best validation epoch.  A non-finite loss
    aborts and restores the last good snapshot.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xBA7C4)))
    opt = AdamW(list(model.parameters()), lr=lr, weight_decay=weight_decay)
    sched = PlateauSchedule(opt, factor=0.1, patience=lr_patience)
    train_indices = np.asarray(train_indices)
    best_val = np.inf
    best_state = copy.deepcopy(model.state_arrays())
    log = log if log is not None else []

    for epoch in range(epochs):
        model.train(True)
        order = rng.permutation(len(train_indices))
        total, nb = 0.0, 0
        diverged = False
        for lo in range(0, len(order), batch_size):
            batch = train_indices[order[lo:lo + batch_size]]
            loss = step_fn(batch)
            lval = float(loss.data)
            if not np.isfinite(lval):
                diverged = True
                break
            backward(loss)
            try:
                opt.step()
            except NanGradient:
                diverged = True
                break
            total += lval
            nb += 1
        if diverged:
            model.load_state_arrays(best_state)
            raise TrainingDiverged(epoch, best_state)

        model.train(False)
        val = float(val_fn())
        sched.update(val)
        row = {"epoch": epoch, "train_loss": total / max(nb, 1),
               "val_loss": val, "lr": opt.lr}
        log.append(row)
        if val < best_val:
            best_val = val
            best_state = copy.deepcopy(model.state_arrays())

    model.load_state_arrays(best_state)
    model.train(False)
    return log


def batched_forward(fn, x, batch_size=64):
    """Apply ``fn`` to slices of ``x`` under no_grad and stack the results."""
    outs = []
    with ad.no_grad():
        for lo in range(0, len(x), batch_size):
            outs.append(fn(x[lo:lo + batch_size]))
    return np.concatenate(outs, axis=0)


def format_log(log) -> str:
    """Line-oriented text log: one epoch per line, key=value fields."""
    lines = []
    for row in log:
        fields = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                          for k, v in row.items())
        lines.append(fields)
    return "\n".join(lines) + "\n"
