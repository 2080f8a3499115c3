"""Log-log slope fits and order verdicts for rho sweeps."""

from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np

from .core import OrderReport
from .errors import DroppedDataWarning, InsufficientDataError, InvalidArgumentError


def fit_order(rho_list: Sequence[float], error_list: Sequence[float],
              strict: bool = False) -> tuple[float, float]:
    """Least-squares slope and R^2 of log(error) against log(rho).

    Pairs with a non-positive error are dropped with a warning; fewer than
    three remaining pairs is an error.
    """
    rho = np.asarray(rho_list, dtype=float)
    err = np.asarray(error_list, dtype=float)
    if rho.shape != err.shape:
        raise InvalidArgumentError("rho_list and error_list differ in length")
    keep = (err > 0) & (rho > 0) & np.isfinite(err)
    if not keep.all():
        msg = f"dropped {int((~keep).sum())} non-positive (rho, error) pairs"
        if strict:
            raise InsufficientDataError(msg)
        warnings.warn(msg, DroppedDataWarning, stacklevel=2)
    if keep.sum() < 3:
        raise InsufficientDataError("need at least three positive (rho, error) pairs")
    lx, ly = np.log(rho[keep]), np.log(err[keep])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - float(np.sum(resid ** 2)) / ss_tot
    return float(slope), float(min(max(r2, 0.0), 1.0))


def order_report(rho_list, error_list, claimed_order: float, kind: str = "O",
                 stderr_list=None, name: str = "", slope_tolerance: float = 0.25,
                 margin: float = 0.25, r2_min: float = 0.95,
                 strict: bool = False) -> OrderReport:
    """Fit and judge one order claim. ``kind`` is ``"O"`` (slope ~ order) or ``"o"`` (slope above it)."""
    rho = np.asarray(rho_list, dtype=float)
    err = np.asarray(error_list, dtype=float)
    se = None if stderr_list is None else np.asarray(stderr_list, dtype=float)
    if np.all(err == 0.0):
        return OrderReport(rho, err, float("nan"), 1.0, claimed_order, kind, "exact-zero", se, name,
                           slope_tolerance, margin, r2_min)
    slope, r2 = fit_order(rho, err, strict=strict)
    if kind == "O":
        ok = abs(slope - claimed_order) <= slope_tolerance and r2 >= r2_min
    elif kind == "o":
        ok = slope >= claimed_order + margin and r2 >= r2_min
    else:
        raise InvalidArgumentError(f"kind must be 'O' or 'o', got {kind!r}")
    return OrderReport(rho, err, slope, r2, claimed_order, kind, "pass" if ok else "fail", se, name,
                       slope_tolerance, margin, r2_min)
