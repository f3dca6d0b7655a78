"""End-to-end flow: calibrate -> redistribute -> fit -> allocate -> quantize -> evaluate."""

from __future__ import annotations

import json
import logging
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import container
from .allocation import (
    METRIC_MODES,
    AllocationState,
    LayerEntry,
    greedy_allocate,
    plan_bits,
    plan_to_dict,
    single_precision,
)
from .errors import AllocationError, FitError, PipelineError
from .gelu_quant import MIN_REGION_BITS, GeluStats, RegionQuantizer, collect_gelu_stats, fake_region_quantize, fit_s0
from .quant import QuantizedTensor, QuantSpec, fake_quantize, minmax_scale, quantize, sqnr_db
from .redistribution import (
    STRATEGIES,
    RedistParams,
    apply_redistribution,
    clamping_loss,
    compute_redist_params,
    ln_linear_pairs,
)
from .tensor import Site, ToyViT, forward, forward_with_taps, quantizable_sites

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MODES = ("sp", "mp", "fp")
FP_BITS = 32


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    model_path: str | None = None
    data_path: str | None = None
    sample_count: int = 32
    mode: str = "mp"
    fully_quantized: bool = False
    bits: int = 8  # single-precision bit-width
    bw: float | None = None  # mixed-precision weight target (defaults to bits)
    ba: float | None = None  # mixed-precision activation target (defaults to bits)
    redistribution: str = "none"
    redistribute_head: bool = True
    metric_mode: str = "sqnr-times-lognumel"
    gelu_quantizer: str = "opt-m"
    activations_first: bool = False
    weighted_mean: bool = False
    sensitivity: str = "local"  # or "upstream"
    seed: int = 0
    report_path: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 2 <= self.bits <= 8:
            raise ValueError("bits must be in [2, 8]")
        for name in ("bw", "ba"):
            v = getattr(self, name)
            if v is not None and not 2 <= v <= 8:
                raise ValueError(f"{name} must be in [2, 8]")
        if self.redistribution not in STRATEGIES:
            raise ValueError(f"redistribution must be one of {STRATEGIES}")
        if self.metric_mode not in METRIC_MODES:
            raise ValueError(f"metric_mode must be one of {METRIC_MODES}")
        if self.gelu_quantizer not in ("opt-m", "uniform"):
            raise ValueError("gelu_quantizer must be 'opt-m' or 'uniform'")
        if self.sensitivity not in ("local", "upstream"):
            raise ValueError("sensitivity must be 'local' or 'upstream'")

    @property
    def target_w(self) -> float:
        return float(self.bits if self.bw is None else self.bw)

    @property
    def target_a(self) -> float:
        return float(self.bits if self.ba is None else self.ba)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Synthetic calibration data
# --------------------------------------------------------------------------


def make_token_data(seed: int, samples: int = 64, tokens: int = 16, dim: int = 32) -> np.ndarray:
    """Pre-embedded token tensors: a two-component Gaussian mixture per token
    with per-channel shifts and scales."""
    rng = np.random.default_rng(seed)
    shifts = rng.normal(0.0, 1.0, size=(2, dim))
    scales = rng.uniform(0.5, 1.5, size=(2, dim))
    comp = rng.integers(0, 2, size=(samples, tokens))
    noise = rng.standard_normal((samples, tokens, dim))
    x = shifts[comp] + scales[comp] * noise
    return x.astype(np.float32)


def save_data(data: np.ndarray, path) -> None:
    container.save_tensors(path, {"tokens": np.asarray(data, np.float32)}, {"kind": "token-data"})


def load_data(path) -> np.ndarray:
    tensors, meta = container.load_tensors(path)
    if meta.get("kind") != "token-data" or "tokens" not in tensors:
        raise ValueError(f"{path}: not a token-data container")
    return tensors["tokens"]


# --------------------------------------------------------------------------
# Calibration
# --------------------------------------------------------------------------


@dataclass
class CalibrationCache:
    sites: list[Site]
    taps: dict[str, np.ndarray]
    gelu_stats: dict[str, GeluStats]
    sample_indices: list[int]
    inputs: np.ndarray

    def site(self, name: str) -> Site:
        for s in self.sites:
            if s.name == name:
                return s
        raise KeyError(name)

    def channel_stats(self, name: str) -> dict[str, np.ndarray]:
        y = self.taps[name].reshape(-1, self.taps[name].shape[-1]).astype(np.float64)
        return {"mean": y.mean(0), "min": y.min(0), "max": y.max(0), "absmax": np.abs(y).max(0)}

    def post_ln_sites(self) -> list[str]:
        """Activation sites fed directly by a LayerNorm (the redistribution targets)."""
        return [s.name for s in self.sites if s.name.endswith((".qkv.input", ".fc1.input")) or s.name == "head.input"]

    def save(self, path) -> None:
        meta = {
            "kind": "calibration-cache",
            "sites": [asdict(s) for s in self.sites],
            "gelu_stats": {k: asdict(v) for k, v in self.gelu_stats.items()},
            "sample_indices": self.sample_indices,
        }
        tensors = {f"tap/{k}": v for k, v in self.taps.items()}
        tensors["inputs"] = self.inputs
        container.save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "CalibrationCache":
        tensors, meta = container.load_tensors(path)
        if meta.get("kind") != "calibration-cache":
            raise ValueError(f"{path}: not a calibration cache")
        sites = [Site(**s) for s in meta["sites"]]
        taps = {s.name: tensors[f"tap/{s.name}"] for s in sites}
        stats = {k: GeluStats(**v) for k, v in meta["gelu_stats"].items()}
        return cls(sites, taps, stats, list(meta["sample_indices"]), tensors["inputs"])


def select_samples(n_available: int, count: int, seed: int) -> list[int]:
    if count > n_available:
        raise ValueError(f"need {count} calibration samples, data has {n_available}")
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(n_available, size=count, replace=False))


def run_calibration(model: ToyViT, data: np.ndarray, config: PipelineConfig) -> CalibrationCache:
    """Tap every quantizable site on ``sample_count`` randomly chosen samples."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 3 or data.shape[-1] != model.in_dim:
        raise PipelineError("calibrate", f"data shape {data.shape} does not match model input dim {model.in_dim}")
    try:
        idx = select_samples(data.shape[0], config.sample_count, config.seed)
    except ValueError as exc:
        raise PipelineError("calibrate", str(exc)) from exc
    sites = quantizable_sites(model, config.fully_quantized)
    x = data[idx]
    _, taps = forward_with_taps(model, x, [s.name for s in sites])
    gelu_stats = {}
    for s in sites:
        if s.quantizer == "opt-m":
            try:
                gelu_stats[s.name] = collect_gelu_stats(list(taps[s.name]))
            except FitError as exc:
                raise PipelineError("calibrate", f"{s.name}: {exc}") from exc
    return CalibrationCache(sites, taps, gelu_stats, idx, x)


# --------------------------------------------------------------------------
# Quantizer fitting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FittedQuantizer:
    site: str
    params: QuantSpec | RegionQuantizer

    @property
    def bits(self) -> int:
        return self.params.bits

    @property
    def kind(self) -> str:
        return "opt-m" if isinstance(self.params, RegionQuantizer) else "uniform"

    def __call__(self, t: np.ndarray) -> np.ndarray:
        if isinstance(self.params, RegionQuantizer):
            return fake_region_quantize(t, self.params)
        return fake_quantize(t, self.params)

    def to_dict(self) -> dict:
        if isinstance(self.params, RegionQuantizer):
            return {"type": "opt-m", **self.params.to_dict()}
        return {"type": "uniform", "bits": self.params.bits, "scale": self.params.scale}


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MPTQ_THREADS", "1")))
    except ValueError:
        return 1


class QuantizerBank:
    """Lazily fitted quantizers per (site, bits), fitted on the calibration taps."""

    def __init__(self, cache: CalibrationCache, gelu_quantizer: str = "opt-m"):
        self.cache = cache
        self.gelu_quantizer = gelu_quantizer
        self._fits: dict[tuple[str, int], FittedQuantizer] = {}
        self._sqnr: dict[tuple[str, int], float] = {}

    def uses_region(self, site: str, bits: int) -> bool:
        s = self.cache.site(site)
        return s.quantizer == "opt-m" and self.gelu_quantizer == "opt-m" and bits >= MIN_REGION_BITS

    def fit(self, site: str, bits: int) -> FittedQuantizer:
        key = (site, bits)
        if key not in self._fits:
            self._fits[key] = self._fit_uncached(site, bits)
        return self._fits[key]

    def prefit(self, keys) -> None:
        keys = [k for k in keys if k not in self._fits]
        n = _threads()
        if n > 1 and len(keys) > 1:
            with ThreadPoolExecutor(max_workers=n) as pool:
                fitted = list(pool.map(lambda k: (k, self._fit_uncached(*k)), keys))
            for k, q in fitted:
                self._fits.setdefault(k, q)
        else:
            for k in keys:
                self.fit(*k)

    def _fit_uncached(self, site: str, bits: int) -> FittedQuantizer:
        tap = self.cache.taps[site]
        if self.uses_region(site, bits):
            return FittedQuantizer(site, fit_s0(tap, bits, self.cache.gelu_stats[site]))
        return FittedQuantizer(site, minmax_scale(tap, bits))

    def sqnr(self, site: str, bits: int) -> float:
        key = (site, bits)
        if key not in self._sqnr:
            tap = self.cache.taps[site]
            self._sqnr[key] = sqnr_db(tap, self.fit(site, bits)(tap))
        return self._sqnr[key]


# --------------------------------------------------------------------------
# Quantized model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantizedViT:
    model: ToyViT
    quantizers: dict[str, FittedQuantizer] = field(default_factory=dict)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self.model, x, self.quantizers)

    def bits(self) -> dict[str, int]:
        return {k: q.bits for k, q in self.quantizers.items()}

    def tensors(self) -> dict[str, np.ndarray | QuantizedTensor]:
        """Model tensors with uniformly quantized weights stored as integer codes."""
        out: dict[str, np.ndarray | QuantizedTensor] = {}
        for name, t in self.model.state_dict().items():
            q = self.quantizers.get(name)
            if q is not None and q.kind == "uniform":
                out[name] = quantize(t, q.params)
            elif q is not None:
                out[name] = q(t)
            else:
                out[name] = t
        return out

    def save(self, path) -> None:
        meta = {
            "kind": "quantized-toy-vit",
            "config": self.model.config(),
            "quantizers": {k: q.to_dict() for k, q in sorted(self.quantizers.items())},
        }
        container.save_tensors(path, self.tensors(), meta)


def apply_allocation(model: ToyViT, bits: Mapping[str, int], bank: QuantizerBank) -> QuantizedViT:
    """Fake-quantize every allocated site at its bit-width."""
    wanted = {site: b for site, b in bits.items() if b != FP_BITS}
    unknown = sorted(set(wanted) - set(bank.cache.taps))
    if unknown:
        raise PipelineError("quantize", f"no calibration tap for sites {unknown}")
    try:
        bank.prefit(list(wanted.items()))
        quantizers = {site: bank.fit(site, b) for site, b in wanted.items()}
    except (FitError, ValueError) as exc:
        raise PipelineError("quantize", f"quantizer fit failed: {exc}") from exc
    return QuantizedViT(model, quantizers)


# --------------------------------------------------------------------------
# Orchestration
# --------------------------------------------------------------------------


@dataclass
class Prepared:
    """Calibrated (and possibly redistributed) model ready for allocation."""

    original: ToyViT
    model: ToyViT
    data: np.ndarray
    cache: CalibrationCache
    bank: QuantizerBank
    redist: dict[str, RedistParams]


def prepare(model: ToyViT, data: np.ndarray, config: PipelineConfig) -> Prepared:
    cache = run_calibration(model, data, config)
    redist: dict[str, RedistParams] = {}
    fused = model
    if config.redistribution != "none":
        try:
            bits = config.bits if config.mode == "sp" else int(round(config.target_a))
            for _, lin in ln_linear_pairs(model, include_head=config.redistribute_head):
                weight = cache.taps[f"{lin}.weight"]
                redist[lin] = compute_redist_params(cache.taps[f"{lin}.input"], weight, config.redistribution, bits=bits)
            fused = apply_redistribution(model, redist)
            log.debug("fused %s into %d LayerNorm/linear pairs", config.redistribution, len(redist))
        except (ValueError, KeyError) as exc:
            raise PipelineError("redistribute", str(exc)) from exc
        cache = run_calibration(fused, data, config)
    return Prepared(model, fused, np.asarray(data, np.float32), cache, QuantizerBank(cache, config.gelu_quantizer), redist)


def initial_state(cache: CalibrationCache, config: PipelineConfig) -> AllocationState:
    entries = []
    for s in cache.sites:
        tap = cache.taps[s.name]
        # activation size per input sample; weights use their full size
        numel = tap.size if s.kind == "weight" else tap.size // tap.shape[0]
        entries.append(LayerEntry(s.name, s.kind, numel))
    return AllocationState(entries, config.target_w, config.target_a, config.metric_mode)


def allocate(prep: Prepared, config: PipelineConfig) -> AllocationState:
    state = initial_state(prep.cache, config)
    log.debug("allocating %d sites in %s mode", len(state.entries), config.mode)
    if config.mode == "fp":
        for e in state.entries:
            e.bits = FP_BITS
        return state
    if config.mode == "sp":
        return single_precision(state, config.bits, config.bits)
    kinds = ("activation", "weight") if config.activations_first else ("weight", "activation")
    bank = prep.bank
    try:
        if config.sensitivity == "local":
            # initial scores need every site at 7 bits; fits are independent
            bank.prefit([(e.layer_id, e.bits - 1) for e in state.entries])
            return greedy_allocate(
                state, lambda e, b: bank.sqnr(e.layer_id, b), kinds, weighted_mean=config.weighted_mean
            )
        return _allocate_upstream(prep, state, kinds, config)
    except (AllocationError, FitError, ValueError) as exc:
        raise PipelineError("allocate", str(exc)) from exc


def _allocate_upstream(prep: Prepared, state: AllocationState, kinds, config: PipelineConfig) -> AllocationState:
    """Activation sensitivity measured with the current allocation applied upstream."""
    bank = prep.bank
    act_sites = [s.name for s in prep.cache.sites if s.kind == "activation"]
    live = dict(prep.cache.taps)

    def retap(bits: Mapping[str, int]) -> None:
        qm = apply_allocation(prep.model, bits, bank)
        _, taps = forward_with_taps(prep.model, prep.cache.inputs, act_sites, qm.quantizers)
        live.update(taps)

    def sqnr_fn(entry: LayerEntry, b: int) -> float:
        tap = live[entry.layer_id]
        return sqnr_db(tap, bank.fit(entry.layer_id, b)(tap))

    def refresh(st: AllocationState) -> bool:
        retap(st.bits())
        return True

    retap(state.bits())
    return greedy_allocate(state, sqnr_fn, kinds, weighted_mean=config.weighted_mean, refresh=refresh)


def _num(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def evaluate(prep: Prepared, state: AllocationState, config: PipelineConfig) -> tuple[QuantizedViT, dict]:
    bits = state.bits()
    qmodel = apply_allocation(prep.model, bits, prep.bank)
    try:
        fp_logits = forward(prep.original, prep.data)
        q_logits = qmodel(prep.data)
    except Exception as exc:  # surfaced with the stage tag
        raise PipelineError("evaluate", str(exc)) from exc

    rows = []
    clamp = {}
    hist: dict[str, Counter] = {}
    for s in prep.cache.sites:
        b = bits[s.name]
        tap = prep.cache.taps[s.name]
        row = {"layer_id": s.name, "kind": s.kind, "bits": b, "numel": int(tap.size)}
        if b == FP_BITS:
            row.update(quantizer="none", sqnr_db=_num(math.inf))
        else:
            q = qmodel.quantizers[s.name]
            row.update(quantizer=q.kind, sqnr_db=_num(prep.bank.sqnr(s.name, b)), params=q.to_dict())
            if s.kind == "activation" and q.kind == "uniform":
                clamp[s.name] = clamping_loss(tap, q.params)
        rows.append(row)
        hist.setdefault(s.block, Counter())[str(b)] += 1

    weights = [r["bits"] for r in rows if r["kind"] == "weight"]
    acts = [r["bits"] for r in rows if r["kind"] == "activation"]
    report = {
        "format_version": FORMAT_VERSION,
        "config": {
            "mode": config.mode,
            "bits": config.bits,
            "targets": {"weights": config.target_w, "activations": config.target_a},
            "redistribution": config.redistribution,
            "metric_mode": config.metric_mode,
            "fully_quantized": config.fully_quantized,
            "gelu_quantizer": config.gelu_quantizer,
            "sample_count": config.sample_count,
            "seed": config.seed,
        },
        "sites": rows,
        "mean_bits": {"weights": float(np.mean(weights)), "activations": float(np.mean(acts))},
        "end_to_end_sqnr_db": _num(sqnr_db(fp_logits, q_logits)),
        "eval_samples": int(prep.data.shape[0]),
        "clamping_loss": {"per_site": clamp, "total": float(sum(clamp.values()))},
        "bit_histogram": {blk: dict(sorted(c.items())) for blk, c in hist.items()},
        "redistribution": {k: v.to_dict() for k, v in sorted(prep.redist.items())},
    }
    return qmodel, report


def make_plan(state: AllocationState, config: PipelineConfig) -> dict:
    return plan_to_dict(
        state,
        {"mode": config.mode, "redistribution": config.redistribution, "seed": config.seed},
    )


def state_from_plan(prep: Prepared, plan: Mapping, config: PipelineConfig) -> AllocationState:
    state = initial_state(prep.cache, config)
    bits = plan_bits(dict(plan))
    missing = [e.layer_id for e in state.entries if e.layer_id not in bits]
    if missing:
        raise PipelineError("evaluate", f"plan lacks sites: {missing}")
    for e in state.entries:
        e.bits = bits[e.layer_id]
    return state


def run_mptq(model: ToyViT, data: np.ndarray, config: PipelineConfig) -> tuple[QuantizedViT, dict, dict]:
    """SQ-b (or other redistribution) -> allocation -> quantization -> evaluation.

    Returns (quantized model, report, plan).
    """
    prep = prepare(model, data, config)
    state = allocate(prep, config)
    qmodel, report = evaluate(prep, state, config)
    return qmodel, report, make_plan(state, config)


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def emit_report(report: Mapping, path) -> None:
    Path(path).write_text(dumps(report))
