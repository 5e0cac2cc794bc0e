"""Training OPs and upload bytes for PEFT methods over transformer shapes.

Two counting conventions are available:

``as-printed``
    The reference layerwise formulas taken literally for each row (linear layers
    counted as ``T·d³``). Kept for comparison; magnitudes are far above the
    reported totals.
``standard-mac``
    Multiply-accumulates of the actual matrix products (``T·d²`` per
    projection). This is the convention the simulator reports.

OPs scale continuously by ``1 - sparsity``. Under the ``trainable`` scope only
the backward terms that compute gradients of head-owned trainable parameters
shrink; under the ``heads`` scope pruned heads also skip their projections,
attention and adapter work. Parameter and byte counts stay at head
granularity: ``floor(sparsity * L * H)`` whole heads are dropped.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InputError
from .lora import pruned_head_count
from .wire import payload_size

logger = logging.getLogger(__name__)

MIB = 1 << 20
COST_FORMAT_VERSION = 1


class PeftMethod(str, enum.Enum):
    FFT = "fft"
    LORA = "lora"
    IA3 = "ia3"
    PROMPT_TUNING = "prompt-tuning"
    P_TUNING = "p-tuning"

    @classmethod
    def parse(cls, text: "str | PeftMethod") -> "PeftMethod":
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower().replace("_", "-")
        aliases = {"prompt": "prompt-tuning", "prompttuning": "prompt-tuning", "ptuning": "p-tuning", "full": "fft"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise InputError(f"unknown PEFT method {text!r}; expected one of {[m.value for m in cls]}") from None


class OpsConvention(str, enum.Enum):
    AS_PRINTED = "as-printed"
    STANDARD_MAC = "standard-mac"

    @classmethod
    def parse(cls, text: "str | OpsConvention") -> "OpsConvention":
        try:
            return cls(text)
        except ValueError:
            raise InputError(f"unknown OPs convention {text!r}") from None


class PruningScope(str, enum.Enum):
    TRAINABLE = "trainable"
    HEADS = "heads"

    @classmethod
    def parse(cls, text: "str | PruningScope") -> "PruningScope":
        try:
            return cls(text)
        except ValueError:
            raise InputError(f"unknown pruning scope {text!r}; expected trainable or heads") from None


@dataclass(frozen=True)
class ArchSpec:
    """Shape parameters of a transformer for cost accounting.

    ``d_ff`` defaults to ``d_model``, which is how the FC row is written.
    ``d_model`` need not divide evenly by ``n_heads``; per-head sizes are
    fractional and parameter counts are rounded.
    """

    name: str
    n_layers: int
    n_heads: int
    d_model: int
    seq_len: int = 512
    rank: int = 16
    prompt_tokens: int = 100
    d_ff: int = 0
    n_classes: int = 3
    bytes_per_param: int = 4

    def __post_init__(self) -> None:
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", self.d_model)
        for name in ("n_layers", "n_heads", "d_model", "seq_len", "rank", "prompt_tokens", "d_ff", "n_classes", "bytes_per_param"):
            if getattr(self, name) < 1:
                raise InputError(f"{self.name}: {name} must be positive, got {getattr(self, name)}")

    @property
    def total_heads(self) -> int:
        return self.n_layers * self.n_heads

    @property
    def head_dim(self) -> float:
        return self.d_model / self.n_heads

    def with_(self, **changes) -> "ArchSpec":
        return replace(self, **changes)


PRESETS: dict[str, ArchSpec] = {
    spec.name: spec
    for spec in (
        ArchSpec("t5-small", n_layers=18, n_heads=8, d_model=512),
        ArchSpec("t5-base", n_layers=36, n_heads=12, d_model=768),
        ArchSpec("bart", n_layers=36, n_heads=16, d_model=1024),
        ArchSpec("distilbert", n_layers=12, n_heads=12, d_model=768),
        ArchSpec("roberta", n_layers=12, n_heads=12, d_model=512),
        ArchSpec("gpt2-small", n_layers=12, n_heads=12, d_model=768),
    )
}


def get_preset(name: str) -> ArchSpec:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise InputError(f"unknown architecture {name!r}; presets: {', '.join(sorted(PRESETS))}") from None


def toy_arch(model_config) -> ArchSpec:
    """ArchSpec of the simulator's model; sequences are processed at full padded length."""
    return ArchSpec(
        name="toy",
        n_layers=model_config.n_layers,
        n_heads=model_config.n_heads,
        d_model=model_config.d_model,
        seq_len=model_config.max_len,
        rank=model_config.rank,
        d_ff=model_config.d_ff,
        n_classes=model_config.n_classes,
    )


@dataclass(frozen=True)
class CostRow:
    component: str
    forward: float
    backward: float

    @property
    def total(self) -> float:
        return self.forward + self.backward


@dataclass(frozen=True)
class CostReport:
    arch: ArchSpec
    method: PeftMethod
    convention: OpsConvention
    scope: PruningScope
    sparsity: float
    rows: tuple[CostRow, ...]
    trainable_params: int
    comm_bytes: int

    @property
    def forward(self) -> float:
        return sum(row.forward for row in self.rows)

    @property
    def backward(self) -> float:
        return sum(row.backward for row in self.rows)

    @property
    def total(self) -> float:
        return self.forward + self.backward

    @property
    def comm_mib(self) -> float:
        return self.comm_bytes / MIB

    def row(self, component: str) -> CostRow:
        for row in self.rows:
            if row.component == component:
                return row
        raise KeyError(component)


# Term roles: "plain" never scales, "head" scales under the heads scope,
# "grad" (head-owned parameter gradient) scales under both scopes.
_Term = tuple[str, str, float]  # (pass, role, value)


def _standard_terms(arch: ArchSpec, method: PeftMethod) -> dict[str, list[_Term]]:
    T, d, f, r, L = arch.seq_len, arch.d_model, arch.d_ff, arch.rank, arch.n_layers
    fft = method is PeftMethod.FFT
    rows: dict[str, list[_Term]] = {
        "qkv": [("fwd", "head", 3 * T * d * d * L), ("bwd", "head", 3 * T * d * d * L)],
        "attention": [("fwd", "head", 2 * T * T * d * L), ("bwd", "head", 4 * T * T * d * L)],
        "fc": [("fwd", "plain", T * d * f * L), ("bwd", "plain", T * d * f * L)],
    }
    if fft:
        rows["qkv"].append(("bwd", "grad", 3 * T * d * d * L))
        rows["fc"].append(("bwd", "plain", T * d * f * L))
    elif method is PeftMethod.LORA:
        rows["lora"] = [
            ("fwd", "plain", 3 * T * d * r * L),
            ("fwd", "head", 3 * T * r * d * L),
            ("bwd", "plain", 6 * T * d * r * L),
            ("bwd", "grad", 6 * T * r * d * L),
        ]
    elif method is PeftMethod.IA3:
        rows["ia3"] = [
            ("fwd", "head", 2 * T * d * L),
            ("fwd", "plain", T * f * L),
            ("bwd", "grad", 4 * T * d * L),
            ("bwd", "plain", 2 * T * f * L),
        ]
    else:
        Tp = arch.prompt_tokens
        layers = 1 if method is PeftMethod.PROMPT_TUNING else L
        longer = (T + Tp) ** 2 - T**2
        rows["prompt"] = [
            ("fwd", "head", (3 * Tp * d * d + 2 * longer * d) * layers),
            ("bwd", "head", (3 * Tp * d * d + 4 * longer * d) * layers),
        ]
    return rows


def _printed_terms(arch: ArchSpec, method: PeftMethod) -> dict[str, list[_Term]]:
    T, d, r, L = arch.seq_len, arch.d_model, arch.rank, arch.n_layers
    rows: dict[str, list[_Term]] = {
        "qkv": [("fwd", "head", L * T * d**3), ("bwd", "head", L * T * d**3), ("bwd", "grad" if method is PeftMethod.FFT else "head", L * T * d**2)],
        "attention": [("fwd", "head", L * (T**2 * d**2 + T**3 * d)), ("bwd", "head", L * (T**2 * d**2 + 3 * T**3 * d))],
        "fc": [("fwd", "plain", L * T * d**3), ("bwd", "plain", L * (T * d**3 + T * d**2))],
    }
    if method is PeftMethod.LORA:
        rows["lora"] = [
            ("fwd", "head", L * T * d**2 * r),
            ("fwd", "plain", L * T * r**2 * d),
            ("bwd", "grad", L * (T * d**2 * r + T * r * d)),
            ("bwd", "plain", L * (T * d * r + T * r**2 * d + T * d**3)),
        ]
    elif method is PeftMethod.IA3:
        rows["ia3"] = [("fwd", "head", L * T * d), ("bwd", "grad", 2 * L * T * d)]
    elif method in (PeftMethod.PROMPT_TUNING, PeftMethod.P_TUNING):
        Tp = arch.prompt_tokens
        layers = 1 if method is PeftMethod.PROMPT_TUNING else L
        rows["prompt"] = [
            ("fwd", "head", layers * (Tp * d**3 + (Tp + T) ** 2 * d**2 + (Tp + T) ** 3 * d)),
            ("bwd", "head", layers * (Tp * d**3 + (Tp + T) ** 2 * d**2 + 3 * (Tp + T) ** 3 * d)),
        ]
    return rows


def kept_heads(arch: ArchSpec, sparsity: float) -> int:
    return arch.total_heads - pruned_head_count(arch.total_heads, sparsity)


def trainable_params(arch: ArchSpec, method: PeftMethod, sparsity: float = 0.0) -> int:
    """Parameters a client trains and uploads.

    Head-owned parts (Q/K/V rows, LoRA B blocks, IA3 key/value scales) shrink
    with pruning. Prompt embeddings are not owned by any head and never do.
    """
    method = PeftMethod.parse(method)
    L, d, f, r, C = arch.n_layers, arch.d_model, arch.d_ff, arch.rank, arch.n_classes
    kept = kept_heads(arch, sparsity)
    dh = arch.head_dim
    if method is PeftMethod.FFT:
        return round(3 * kept * dh * d) + L * d * f + d * C
    if method is PeftMethod.LORA:
        return 3 * L * r * d + round(3 * kept * dh * r) + d * C
    if method is PeftMethod.IA3:
        return round(2 * kept * dh) + L * f
    if method is PeftMethod.PROMPT_TUNING:
        return arch.prompt_tokens * d
    return L * arch.prompt_tokens * d


def comm_for(arch: ArchSpec, method: PeftMethod | str, sparsity: float = 0.0) -> int:
    """Upload bytes per client per round."""
    return trainable_params(arch, PeftMethod.parse(method), sparsity) * arch.bytes_per_param


def ops_for(
    arch: ArchSpec,
    method: PeftMethod | str,
    sparsity: float = 0.0,
    convention: OpsConvention | str = OpsConvention.STANDARD_MAC,
    scope: PruningScope | str = PruningScope.TRAINABLE,
) -> CostReport:
    """Forward and backward OPs of one training sequence, row by row."""
    method = PeftMethod.parse(method)
    convention = OpsConvention.parse(convention)
    scope = PruningScope.parse(scope)
    if not 0.0 <= sparsity < 1.0:
        raise InputError(f"sparsity must be in [0, 1), got {sparsity}")
    kept_fraction = 1.0 - float(sparsity)
    terms = _standard_terms(arch, method) if convention is OpsConvention.STANDARD_MAC else _printed_terms(arch, method)

    def factor(role: str) -> float:
        if role == "grad" or (role == "head" and scope is PruningScope.HEADS):
            return kept_fraction
        return 1.0

    rows = []
    for component, row_terms in terms.items():
        fwd = sum(float(value) * factor(role) for pass_, role, value in row_terms if pass_ == "fwd")
        bwd = sum(float(value) * factor(role) for pass_, role, value in row_terms if pass_ == "bwd")
        rows.append(CostRow(component, fwd, bwd))
    params = trainable_params(arch, method, sparsity)
    return CostReport(
        arch=arch,
        method=method,
        convention=convention,
        scope=scope,
        sparsity=float(sparsity),
        rows=tuple(rows),
        trainable_params=params,
        comm_bytes=params * arch.bytes_per_param,
    )


def training_ops(
    arch: ArchSpec,
    method: PeftMethod | str,
    sparsity: float,
    samples: int,
    convention: OpsConvention | str = OpsConvention.STANDARD_MAC,
    scope: PruningScope | str = PruningScope.TRAINABLE,
) -> float:
    """Per-sequence training OPs times the number of sequences processed."""
    return ops_for(arch, method, sparsity, convention, scope).total * samples


def payload_bytes(arch: ArchSpec, sparsity: float) -> int:
    """Exact size of the simulator's encoded LoRA update at ``sparsity``."""
    return payload_size(
        arch.n_layers, arch.n_heads, arch.d_model, arch.rank, arch.n_classes, kept_heads(arch, sparsity)
    )


def format_count(value: float) -> str:
    for unit, scale in (("P", 1e15), ("T", 1e12), ("G", 1e9), ("M", 1e6), ("K", 1e3)):
        if abs(value) >= scale:
            return f"{value / scale:.2f}{unit}"
    return f"{value:.0f}"


# Reference LoRA r=16 figures for T5-Small: dense and 90% head-pruned.
REFERENCE = {
    "dense_ops": 33.07e9,
    "pruned_ops": 8.47e9,
    "dense_mib": 3.38,
    "pruned_mib": 1.86,
    "ops_ratio": 3.9,
    "comm_ratio": 1.8,
}
RECONCILE_SPARSITY = 0.9


@dataclass(frozen=True)
class ReconciliationReport:
    dense: dict[OpsConvention, CostReport]
    pruned: dict[OpsConvention, CostReport]

    def ops_ratio(self, convention: OpsConvention) -> float:
        return self.dense[convention].total / self.pruned[convention].total

    @property
    def comm_ratio(self) -> float:
        return self.dense[OpsConvention.STANDARD_MAC].comm_bytes / self.pruned[OpsConvention.STANDARD_MAC].comm_bytes

    def deviation(self, convention: OpsConvention) -> tuple[float, float]:
        """Relative deviation of dense and pruned OPs from the reference figures."""
        return (
            self.dense[convention].total / REFERENCE["dense_ops"] - 1.0,
            self.pruned[convention].total / REFERENCE["pruned_ops"] - 1.0,
        )

    def to_text(self) -> str:
        dense = self.dense[OpsConvention.STANDARD_MAC]
        pruned = self.pruned[OpsConvention.STANDARD_MAC]
        lines = [
            f"T5-Small + LoRA r={dense.arch.rank}, sparsity {RECONCILE_SPARSITY} (scope: {dense.scope.value})",
            f"{'convention':<14} {'dense':>10} {'pruned':>10} {'ratio':>7}   reference {format_count(REFERENCE['dense_ops'])} / "
            f"{format_count(REFERENCE['pruned_ops'])} ({REFERENCE['ops_ratio']}x)",
        ]
        for convention in OpsConvention:
            lines.append(
                f"{convention.value:<14} {format_count(self.dense[convention].total):>10} "
                f"{format_count(self.pruned[convention].total):>10} {self.ops_ratio(convention):>6.2f}x"
            )
        lines.append(
            f"comm: dense {dense.comm_mib:.2f}MB, pruned {pruned.comm_mib:.2f}MB, ratio {self.comm_ratio:.2f}x "
            f"(reference {REFERENCE['dense_mib']}MB / {REFERENCE['pruned_mib']}MB, {REFERENCE['comm_ratio']}x)"
        )
        printed_dense, _ = self.deviation(OpsConvention.AS_PRINTED)
        mac_dense, mac_pruned = self.deviation(OpsConvention.STANDARD_MAC)
        lines.append(
            f"discrepancy: as-printed dense OPs are {printed_dense + 1.0:.3g}x the reference "
            f"(linear rows counted as T*d^3); standard-mac deviates {mac_dense:+.1%} dense, {mac_pruned:+.1%} pruned"
        )
        return "\n".join(lines)


def reconciliation_report(scope: PruningScope | str = PruningScope.HEADS) -> ReconciliationReport:
    arch = PRESETS["t5-small"]
    dense = {c: ops_for(arch, PeftMethod.LORA, 0.0, c, scope) for c in OpsConvention}
    pruned = {c: ops_for(arch, PeftMethod.LORA, RECONCILE_SPARSITY, c, scope) for c in OpsConvention}
    return ReconciliationReport(dense, pruned)


def cost_grid(
    archs: Iterable[ArchSpec],
    methods: Iterable[PeftMethod | str],
    sparsities: Iterable[float],
    scope: PruningScope | str = PruningScope.TRAINABLE,
) -> list[CostReport]:
    """Reports for every grid point under both conventions."""
    methods = [PeftMethod.parse(m) for m in methods]
    sparsities = list(sparsities)
    return [
        ops_for(arch, method, s, convention, scope)
        for arch in archs
        for method in methods
        for s in sparsities
        for convention in OpsConvention
    ]


_CSV_ARCH_FIELDS = (
    "n_layers", "n_heads", "d_model", "seq_len", "rank", "prompt_tokens", "d_ff", "n_classes", "bytes_per_param",
)
CSV_COLUMNS = (
    ("format_version", "report", "arch")
    + _CSV_ARCH_FIELDS
    + ("method", "convention", "scope", "sparsity", "component", "forward", "backward", "trainable_params", "comm_bytes")
)


def write_cost_csv(reports: Sequence[CostReport], path: str | Path) -> Path:
    """Long format: one line per (report, row)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for index, report in enumerate(reports):
            arch_values = [getattr(report.arch, name) for name in _CSV_ARCH_FIELDS]
            for row in report.rows:
                writer.writerow(
                    [COST_FORMAT_VERSION, index, report.arch.name, *arch_values, report.method.value,
                     report.convention.value, report.scope.value, repr(report.sparsity), row.component,
                     repr(row.forward), repr(row.backward), report.trainable_params, report.comm_bytes]
                )
    return path


def read_cost_csv(path: str | Path) -> list[CostReport]:
    grouped: dict[int, list[dict[str, str]]] = {}
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        for record in csv.DictReader(fh):
            if int(record["format_version"]) != COST_FORMAT_VERSION:
                raise InputError(f"{path}: unsupported cost table version {record['format_version']}")
            grouped.setdefault(int(record["report"]), []).append(record)
    reports = []
    for index in sorted(grouped):
        records = grouped[index]
        first = records[0]
        arch = ArchSpec(first["arch"], **{name: int(first[name]) for name in _CSV_ARCH_FIELDS})
        reports.append(
            CostReport(
                arch=arch,
                method=PeftMethod.parse(first["method"]),
                convention=OpsConvention.parse(first["convention"]),
                scope=PruningScope.parse(first["scope"]),
                sparsity=float(first["sparsity"]),
                rows=tuple(CostRow(r["component"], float(r["forward"]), float(r["backward"])) for r in records),
                trainable_params=int(first["trainable_params"]),
                comm_bytes=int(first["comm_bytes"]),
            )
        )
    return reports


def format_cost_table(reports: Sequence[CostReport]) -> str:
    """Text table with one line per (arch, method, sparsity) and an OPs column per convention."""
    keyed: dict[tuple, dict[OpsConvention, CostReport]] = {}
    for report in reports:
        key = (report.arch.name, report.method.value, report.sparsity, report.scope.value)
        keyed.setdefault(key, {})[report.convention] = report
    header = (
        f"{'arch':<12} {'method':<14} {'sparsity':>8} {'params':>12} {'comm':>10} "
        f"{'OPs (standard-mac)':>19} {'OPs (as-printed)':>17}"
    )
    lines = [header, "-" * len(header)]
    for (arch, method, sparsity, _), by_convention in keyed.items():
        any_report = next(iter(by_convention.values()))
        ops = {
            c: format_count(by_convention[c].total) if c in by_convention else "-" for c in OpsConvention
        }
        lines.append(
            f"{arch:<12} {method:<14} {sparsity:>8.2f} {any_report.trainable_params:>12,} "
            f"{any_report.comm_mib:>8.2f}MB {ops[OpsConvention.STANDARD_MAC]:>19} {ops[OpsConvention.AS_PRINTED]:>17}"
        )
    return "\n".join(lines)
