"""Closed-form right-hand sides of the generalization and generation bounds.

KL and CMI inputs are per-sample means; the bounds use the corresponding
totals over the ``n`` training rows, ``n * mean``.
"""
from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field, replace

UNESTIMATED_ALWAYS = ("I(e,phi;S)",)


@dataclass(frozen=True)
class BoundInputs:
    n: int
    Delta: float
    Delta_z: float = 0.0
    kl_empirical: float = 0.0
    kl_cmi: float = 0.0
    train_loss_mean: float = 0.0
    beta_q: float = 0.0
    delta_cover: float = 1.0
    log_covering_number: float = 0.0
    d_K: int = 1
    K: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if not self.Delta >= 0 or not self.Delta_z >= 0:
            raise ValueError("Delta and Delta_z must be non-negative")
        if not 0.0 < self.delta_cover <= 1.0:
            raise ValueError("delta_cover must lie in (0, 1]")
        for name in ("kl_empirical", "kl_cmi", "train_loss_mean", "beta_q",
                     "log_covering_number"):
            v = getattr(self, name)
            if math.isnan(v) or v < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def kl_empirical_total(self) -> float:
        return self.n * self.kl_empirical

    @property
    def kl_cmi_total(self) -> float:
        return self.n * self.kl_cmi


def _tail(b: BoundInputs) -> float:
    return b.Delta / math.sqrt(b.n)


def _sqrt_term(coef: float, Delta: float, total: float, n: int) -> float:
    if math.isinf(total):
        return math.inf
    return coef * Delta * math.sqrt(total / n)


def rhs_supersample(b: BoundInputs) -> float:
    """``2 Delta sqrt((KL_emp + CMI) / n) + Delta / sqrt(n)`` with totals over rows."""
    return _sqrt_term(2.0, b.Delta, b.kl_empirical_total + b.kl_cmi_total, b.n) + _tail(b)


def rhs_permutation(b: BoundInputs) -> float:
    """``3 Delta sqrt(KL / n) + Delta / sqrt(n)``; ``kl_cmi`` carries the single KL."""
    return _sqrt_term(3.0, b.Delta, b.kl_cmi_total, b.n) + _tail(b)


def rhs_metric_entropy(b: BoundInputs) -> float:
    """``4 Delta sqrt(2 beta n delta Delta_z) + 3 Delta sqrt(2 log N / n) + Delta / sqrt(n)``."""
    quant = 4.0 * b.Delta * math.sqrt(2.0 * b.beta_q * b.n * b.delta_cover * b.Delta_z)
    cover = 3.0 * b.Delta * math.sqrt(2.0 * b.log_covering_number / b.n)
    return quant + cover + _tail(b)


def rhs_wasserstein(b: BoundInputs) -> float:
    """``2 * train l_0 + 4 Delta sqrt(2 KL_emp) + 2 Delta / sqrt(n)``; ``KL_emp`` is the row mean."""
    if math.isinf(b.kl_empirical):
        return math.inf
    return (2.0 * b.train_loss_mean + 4.0 * b.Delta * math.sqrt(2.0 * b.kl_empirical)
            + 2.0 * _tail(b))


def rhs_basic_it(b: BoundInputs) -> float:
    """``Delta sqrt(2 I / n)`` with ``I`` the total CMI."""
    return _sqrt_term(1.0, b.Delta, 2.0 * b.kl_cmi_total, b.n)


def natarajan_cmi_cap(d_K: int, K: int, n: int) -> float:
    """``d_K log(C(K,2) * 2 e n / d_K)`` nats; requires ``K >= 2`` and ``2n > d_K + 1``."""
    if K < 2:
        raise ValueError("the cap needs K >= 2")
    if d_K < 1 or 2 * n <= d_K + 1:
        raise ValueError("need d_K >= 1 and 2n > d_K + 1")
    return d_K * math.log(math.comb(K, 2) * 2.0 * math.e * n / d_K)


def parametric_log_covering(d_phi: int, d_z: int, L0: float, delta: float) -> float:
    """``d_phi d_z log(L0 / delta)``, floored at zero."""
    if delta <= 0 or L0 <= 0:
        raise ValueError("L0 and delta must be positive")
    return max(0.0, d_phi * d_z * math.log(L0 / delta))


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


@dataclass
class BoundReport:
    inputs: BoundInputs
    measured_gap: float
    rhs_supersample: float
    rhs_permutation: float
    rhs_metric_entropy: float
    rhs_wasserstein: float
    natarajan_cap: float
    rhs_basic_it: float = math.nan
    unestimated_terms: list = field(default_factory=lambda: list(UNESTIMATED_ALWAYS))
    notes: dict = field(default_factory=dict)

    @classmethod
    def from_inputs(cls, b: BoundInputs, measured_gap: float, basic_cmi: float | None = None,
                    **notes) -> "BoundReport":
        """Evaluate every RHS; ``basic_cmi`` (per-row) replaces ``kl_cmi`` in the basic bound."""
        cap = natarajan_cmi_cap(b.d_K, b.K, b.n) if b.K >= 2 and 2 * b.n > b.d_K + 1 else 0.0
        terms = list(UNESTIMATED_ALWAYS)
        terms.append("I(J~;T|e,phi,X~) [proxy: supersample CMI estimate]")
        basic = b if basic_cmi is None else replace(b, kl_cmi=float(basic_cmi))
        return cls(b, float(measured_gap), rhs_supersample(b), rhs_permutation(b),
                   rhs_metric_entropy(b), rhs_wasserstein(b), cap, rhs_basic_it(basic),
                   terms, dict(notes))

    RHS_FIELDS = ("rhs_supersample", "rhs_permutation", "rhs_metric_entropy")

    @property
    def violations(self) -> list[str]:
        """Gap bounds whose value falls below the measured gap."""
        return [f for f in self.RHS_FIELDS if self.measured_gap > getattr(self, f)]

    def csv_header(self) -> str:
        return ",".join(list(asdict(self.inputs)) + self._own_fields() + ["unestimated_terms"])

    def _own_fields(self) -> list[str]:
        return ["measured_gap", "rhs_supersample", "rhs_permutation", "rhs_metric_entropy",
                "rhs_wasserstein", "natarajan_cap", "rhs_basic_it"]

    def csv_row(self) -> str:
        vals = [_fmt(v) for v in asdict(self.inputs).values()]
        vals += [_fmt(float(getattr(self, f))) for f in self._own_fields()]
        vals.append('"' + "; ".join(self.unestimated_terms) + '"')
        return ",".join(vals)

    def text(self) -> str:
        buf = io.StringIO()
        b = self.inputs
        buf.write(f"bound report (n={b.n}, K={b.K}, Delta={b.Delta:g})\n")
        buf.write(f"  measured gap          {self.measured_gap:.6g}\n")
        buf.write(f"  empirical KL (mean)   {_fmt(b.kl_empirical)}\n")
        buf.write(f"  CMI estimate (mean)   {_fmt(b.kl_cmi)}\n")
        buf.write(f"  supersample RHS       {_fmt(self.rhs_supersample)}\n")
        buf.write(f"  permutation RHS       {_fmt(self.rhs_permutation)}  (proxy)\n")
        buf.write(f"  metric-entropy RHS    {_fmt(self.rhs_metric_entropy)}\n")
        buf.write(f"  basic IT bound        {_fmt(self.rhs_basic_it)}\n")
        buf.write(f"  Wasserstein RHS       {_fmt(self.rhs_wasserstein)}\n")
        buf.write(f"  Natarajan CMI cap     {_fmt(self.natarajan_cap)}\n")
        buf.write("  not estimated: " + "; ".join(self.unestimated_terms) + "\n")
        for k, v in self.notes.items():
            buf.write(f"  {k}: {v}\n")
        flag = ", ".join(self.violations) or "none"
        buf.write(f"  violations: {flag}\n")
        return buf.getvalue()
