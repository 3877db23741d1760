"""Exact inference on the fixed four-variable SCM  C -> X -> F -> Y <- C.

Every quantity is computed by enumerating the joint table, which stays below
8**4 states. Nothing here is approximate, so checks run at 1e-12.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROW_TOL = 1e-12
MAX_DOMAIN = 8
SECTIONS = ("sizes", "prior", "cpt_x", "cpt_f", "cpt_y")


class ScmError(ValueError):
    pass


class PositivityError(ScmError):
    def __init__(self, f, c):
        self.f, self.c = f, c
        super().__init__(f"positivity violated: P(F={f}, C={c}) = 0 while P(C={c}) > 0")


class UndefinedConditionalError(ScmError):
    pass


def _check_rows(name, table, tol=ROW_TOL):
    if np.any(table < 0) or not np.all(np.isfinite(table)):
        raise ScmError(f"{name}: entries must be finite and nonnegative")
    sums = table.reshape(-1, table.shape[-1]).sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
    if bad.size:
        raise ScmError(f"{name}: row {int(bad[0])} sums to {sums[bad[0]]!r}, not 1")


@dataclass(frozen=True)
class DiscreteScm:
    """Tables for P(C), P(X|C), P(F|X), P(Y|C,F).

    ``cpt_f`` must be indexed by X alone; any table making F depend on C
    directly is rejected, since that would change the graph.
    """

    prior: np.ndarray
    cpt_x: np.ndarray
    cpt_f: np.ndarray
    cpt_y: np.ndarray

    def __post_init__(self):
        for name in ("prior", "cpt_x", "cpt_f", "cpt_y"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=np.float64))
        if self.prior.ndim != 1 or self.cpt_x.ndim != 2 or self.cpt_y.ndim != 3:
            raise ScmError("table ranks must be prior:1, cpt_x:2, cpt_y:3")
        if self.cpt_f.ndim != 2:
            raise ScmError("cpt_f must be P(F|X); a direct C -> F dependence is not allowed")
        nc, nx, nf, ny = self.sizes
        if self.cpt_x.shape != (nc, nx):
            raise ScmError(f"cpt_x shape {self.cpt_x.shape} != ({nc}, {nx})")
        if self.cpt_f.shape[0] != nx:
            raise ScmError(f"cpt_f shape {self.cpt_f.shape} does not match |X|={nx}")
        if self.cpt_y.shape[:2] != (nc, nf):
            raise ScmError(f"cpt_y shape {self.cpt_y.shape} does not match (|C|, |F|) = ({nc}, {nf})")
        for n in self.sizes:
            if not 1 <= n <= MAX_DOMAIN:
                raise ScmError(f"domain sizes must lie in 1..{MAX_DOMAIN}, got {self.sizes}")
        for name in ("prior", "cpt_x", "cpt_f", "cpt_y"):
            _check_rows(name, getattr(self, name))

    @property
    def sizes(self) -> tuple[int, int, int, int]:
        return (self.prior.shape[0], self.cpt_x.shape[1], self.cpt_f.shape[1], self.cpt_y.shape[2])


@dataclass(frozen=True)
class DistTable:
    variables: tuple[str, ...]
    values: np.ndarray

    def marginal(self, *keep: str) -> "DistTable":
        drop = tuple(i for i, v in enumerate(self.variables) if v not in keep)
        vals = self.values.sum(axis=drop) if drop else self.values
        kept = tuple(v for v in self.variables if v in keep)
        order = [kept.index(v) for v in keep]
        return DistTable(tuple(keep), np.transpose(vals, order))


def joint(scm: DiscreteScm) -> DistTable:
    """P(c, x, f, y) = P(c) P(x|c) P(f|x) P(y|c,f)."""
    vals = (scm.prior[:, None, None, None]
            * scm.cpt_x[:, :, None, None]
            * scm.cpt_f[None, :, :, None]
            * scm.cpt_y[:, None, :, :])
    return DistTable(("C", "X", "F", "Y"), vals)


def observational(scm: DiscreteScm, y: int, f: int) -> float:
    """P(Y=y | F=f) from the joint."""
    pfy = joint(scm).marginal("F", "Y").values
    pf = pfy[f].sum()
    if pf <= 0:
        raise UndefinedConditionalError(f"P(F={f}) = 0; P(Y|F={f}) is undefined")
    return float(pfy[f, y] / pf)


def intervene(scm: DiscreteScm, f_value: int) -> DiscreteScm:
    """Graph surgery do(F=f_value): P(F|X) becomes a point mass."""
    nf = scm.sizes[2]
    if not 0 <= f_value < nf:
        raise ScmError(f"F value {f_value} outside domain 0..{nf - 1}")
    cpt_f = np.zeros_like(scm.cpt_f)
    cpt_f[:, f_value] = 1.0
    return DiscreteScm(scm.prior, scm.cpt_x, cpt_f, scm.cpt_y)


def interventional(scm: DiscreteScm, y: int, f: int) -> float:
    """P(Y=y | do(F=f)) as the Y-marginal of the surgically modified model."""
    return float(joint(intervene(scm, f)).marginal("Y").values[y])


def _conditional_y_given_fc(scm: DiscreteScm) -> tuple[np.ndarray, np.ndarray]:
    pcfy = joint(scm).marginal("C", "F", "Y").values
    pcf = pcfy.sum(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = pcfy / pcf[:, :, None]
    return cond, pcf


def check_positivity(scm: DiscreteScm, f: int) -> None:
    _, pcf = _conditional_y_given_fc(scm)
    for c in range(scm.sizes[0]):
        if scm.prior[c] > 0 and pcf[c, f] <= 0:
            raise PositivityError(f, c)


def backdoor_adjust(scm: DiscreteScm, y: int, f: int) -> float:
    """sum_c P(y | f, c) P(c), with P(y|f,c) estimated from the joint."""
    cond, pcf = _conditional_y_given_fc(scm)
    total = 0.0
    for c in range(scm.sizes[0]):
        if scm.prior[c] == 0:
            continue
        if pcf[c, f] <= 0:
            raise PositivityError(f, c)
        total += cond[c, f, y] * scm.prior[c]
    return float(total)


@dataclass
class DocalcReport:
    context_dev: float = 0.0
    exchange_dev: float = 0.0
    adjust_dev: float = 0.0
    checked_f: int = 0
    skipped_pairs: int = 0
    tol: float = ROW_TOL
    notes: list[str] = field(default_factory=list)

    @property
    def context_pass(self) -> bool:
        return self.context_dev <= self.tol

    @property
    def exchange_pass(self) -> bool:
        return self.exchange_dev <= self.tol

    @property
    def adjust_pass(self) -> bool:
        return self.adjust_dev <= self.tol

    @property
    def passed(self) -> bool:
        return self.context_pass and self.exchange_pass and self.adjust_pass


def verify_docalc(scm: DiscreteScm, tol: float = ROW_TOL) -> DocalcReport:
    """Numerically check the three steps that turn P(Y|do(F)) into the adjustment sum.

    context: P(c | do(f)) == P(c).  exchange: P(y | do(f), c) == P(y | f, c).
    adjust: backdoor_adjust == surgery marginal. (c, f) pairs with zero mass
    on either side are skipped and counted rather than treated as failures.
    """
    rep = DocalcReport(tol=tol)
    nc, _, nf, ny = scm.sizes
    obs_cond, obs_pcf = _conditional_y_given_fc(scm)
    for f in range(nf):
        surg = joint(intervene(scm, f))
        pc_do = surg.marginal("C").values
        rep.context_dev = max(rep.context_dev, float(np.max(np.abs(pc_do - scm.prior))))
        pcy_do = surg.marginal("C", "Y").values
        for c in range(nc):
            if pc_do[c] <= 0 or obs_pcf[c, f] <= 0:
                rep.skipped_pairs += 1
                continue
            do_cond = pcy_do[c] / pc_do[c]
            rep.exchange_dev = max(rep.exchange_dev, float(np.max(np.abs(do_cond - obs_cond[c, f]))))
        try:
            adjusted = np.array([backdoor_adjust(scm, y, f) for y in range(ny)])
        except PositivityError as err:
            rep.notes.append(str(err))
            continue
        surgery = surg.marginal("Y").values
        rep.adjust_dev = max(rep.adjust_dev, float(np.max(np.abs(adjusted - surgery))))
        rep.checked_f += 1
    return rep


def random_scm(rng: np.random.Generator, low: int = 2, high: int = 5) -> DiscreteScm:
    """Dirichlet(1) tables with each domain size drawn from low..high."""
    nc, nx, nf, ny = rng.integers(low, high + 1, size=4)

    def rows(*shape):
        t = rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])
        return t / t.sum(axis=-1, keepdims=True)

    return DiscreteScm(rows(nc), rows(nc, nx), rows(nx, nf), rows(nc, nf, ny))


# ---------------------------------------------------------------- file format


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def load_scm(path: str | Path) -> DiscreteScm:
    """Read an SCM from an INI-style key-value file (schema in docs/formats.md)."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        read = cp.read(path)
    except configparser.Error as err:
        raise ScmError(f"{path}: {err}") from None
    if not read:
        raise ScmError(f"{path}: cannot read file")
    extra = set(cp.sections()) - set(SECTIONS)
    if extra:
        raise ScmError(f"unknown section(s) {sorted(extra)}; the graph is fixed to C->X->F->Y<-C")
    missing = [s for s in SECTIONS if s not in cp]
    if missing:
        raise ScmError(f"missing section(s) {missing}")
    try:
        sz = cp["sizes"]
        nc, nx, nf, ny = (int(sz[k]) for k in ("C", "X", "F", "Y"))
        prior = np.array(_floats(cp["prior"]["p"]))
        cpt_x = np.array([_floats(cp["cpt_x"][str(c)]) for c in range(nc)])
        cpt_f = np.array([_floats(cp["cpt_f"][str(x)]) for x in range(nx)])
        cpt_y = np.array([[_floats(cp["cpt_y"][f"{c},{f}"]) for f in range(nf)] for c in range(nc)])
    except (KeyError, ValueError) as err:
        raise ScmError(f"{path}: malformed entry {err}") from None
    if prior.shape != (nc,) or cpt_x.shape != (nc, nx) or cpt_f.shape != (nx, nf) or cpt_y.shape != (nc, nf, ny):
        raise ScmError(f"{path}: row lengths disagree with [sizes]")
    return DiscreteScm(prior, cpt_x, cpt_f, cpt_y)


def dump_scm(scm: DiscreteScm, path: str | Path) -> None:
    nc, nx, nf, ny = scm.sizes
    lines = ["[sizes]", f"C = {nc}", f"X = {nx}", f"F = {nf}", f"Y = {ny}", "",
             "[prior]", "p = " + " ".join(repr(float(v)) for v in scm.prior), "", "[cpt_x]"]
    lines += [f"{c} = " + " ".join(repr(float(v)) for v in scm.cpt_x[c]) for c in range(nc)]
    lines += ["", "[cpt_f]"]
    lines += [f"{x} = " + " ".join(repr(float(v)) for v in scm.cpt_f[x]) for x in range(nx)]
    lines += ["", "[cpt_y]"]
    lines += [f"{c},{f} = " + " ".join(repr(float(v)) for v in scm.cpt_y[c, f])
              for c in range(nc) for f in range(nf)]
    Path(path).write_text("\n".join(lines) + "\n")
