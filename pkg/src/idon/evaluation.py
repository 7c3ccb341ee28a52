"""Relative test errors of the forward and inverse maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

NORM_NOTE = "relative error = ||pred - true||_2 / ||true||_2 per sample"


def relative_errors(pred, true) -> np.ndarray:
    """Per-row ``||pred - true||_2 / ||true||_2``."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    true = np.atleast_2d(np.asarray(true, dtype=np.float64))
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    denom = np.linalg.norm(true, axis=1)
    if np.any(denom == 0):
        raise ValueError("relative error undefined for an all-zero reference row")
    return np.linalg.norm(pred - true, axis=1) / denom


@dataclass
class EvalReport:
    forward: np.ndarray
    inverse: np.ndarray
    footer: dict = field(default_factory=dict)

    @staticmethod
    def _stats(e: np.ndarray) -> tuple:
        return (float(np.mean(e)), float(np.std(e))) if len(e) else (float("nan"), float("nan"))

    @property
    def forward_mean_std(self) -> tuple:
        return self._stats(self.forward)

    @property
    def inverse_mean_std(self) -> tuple:
        return self._stats(self.inverse)

    def summary(self) -> dict:
        fm, fs = self.forward_mean_std
        im, is_ = self.inverse_mean_std
        return {"n": len(self.forward), "fwd_err_mean": fm, "fwd_err_std": fs, "inv_err_mean": im, "inv_err_std": is_}

    def write_csv(self, path) -> None:
        """Per-sample rows, then ``#``-prefixed summary and footer lines."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", "fwd_rel_err", "inv_rel_err"])
            for i, (f, v) in enumerate(zip(self.forward, self.inverse)):
                w.writerow([i, repr(float(f)), repr(float(v))])
        with open(path, "a", newline="") as fh:
            fh.write(f"# {NORM_NOTE}\n")
            for k, v in self.summary().items():
                fh.write(f"# {k}={v!r}\n")
            for k, v in self.footer.items():
                fh.write(f"# {k}={v}\n")

    @classmethod
    def read_csv(cls, path) -> "EvalReport":
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
        body = rows[1:]
        return cls(np.array([float(r[1]) for r in body]), np.array([float(r[2]) for r in body]))


def evaluate(model, inputs, outputs) -> EvalReport:
    """Forward error of ``model.predict`` and inverse error of ``model.predict_inverse``."""
    fwd = relative_errors(model.predict(inputs), outputs)
    inv = relative_errors(model.predict_inverse(outputs), inputs)
    return EvalReport(fwd, inv)
