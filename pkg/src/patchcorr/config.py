"""Pipeline configuration: defaults, TOML round trip, fingerprinting."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - 3.10 fallback
    import tomli as tomllib

from .errors import ParseError
from .evaluation import ALL_METHODS, ProtocolConfig
from .features import ColorSpace, FeatureConfig
from .grid import GridSpec
from .learning import LearnConfig
from .metric import MetricMode

DEFAULT_PROBE_GRID = GridSpec(image_w=48, image_h=128, patch_w=18, patch_h=24,
                              stride_x=6, stride_y=8)
DEFAULT_GALLERY_GRID = GridSpec(image_w=48, image_h=128, patch_w=18, patch_h=24,
                                stride_x=3, stride_y=4)


@dataclass(frozen=True)
class PipelineConfig:
    probe_grid: GridSpec = DEFAULT_PROBE_GRID
    gallery_grid: GridSpec = DEFAULT_GALLERY_GRID
    features: FeatureConfig = field(default_factory=FeatureConfig)
    metric_mode: MetricMode = MetricMode.SHARED
    ridge: float | None = None  # None = scale-aware default
    learn: LearnConfig = field(default_factory=LearnConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)

    def fingerprint(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()[:16]


def _grid_section(name: str, g: GridSpec) -> list[str]:
    return [
        f"[grid.{name}]",
        f"image_w = {g.image_w}",
        f"image_h = {g.image_h}",
        f"patch_w = {g.patch_w}",
        f"patch_h = {g.patch_h}",
        f"stride_x = {g.stride_x}",
        f"stride_y = {g.stride_y}",
        "",
    ]


def dump_config(cfg: PipelineConfig) -> str:
    f, l, p = cfg.features, cfg.learn, cfg.protocol
    lines = []
    lines += _grid_section("probe", cfg.probe_grid)
    lines += _grid_section("gallery", cfg.gallery_grid)
    lines += [
        "[features]",
        f'color_space = "{f.color_space.value}"',
        f"bins_per_channel = {f.bins_per_channel}",
        f"grad_orient_bins = {f.grad_orient_bins}",
        f"grad_cells = [{f.grad_cells[0]}, {f.grad_cells[1]}]",
        f"pca_dim = {f.pca_dim if f.pca_dim is not None else 0}",
        "",
        "[metric]",
        f'mode = "{cfg.metric_mode.value}"',
        f"ridge = {cfg.ridge if cfg.ridge is not None else -1.0}",
        "",
        "[learn]",
        f"epsilon = {l.epsilon}",
        f"n_cmc = {l.n_cmc}",
        f"structures_per_iter = {l.structures_per_iter}",
        f"range_lo = {l.candidate_ranges[0]}",
        f"range_hi = {l.candidate_ranges[1]}",
        f"max_iters = {l.max_iters}",
        f"use_eval_module = {'true' if l.use_eval_module else 'false'}",
        f"t_c = {l.t_c}",
        f"t_d = {l.t_d}",
        f"link_cmc_subsample = {l.link_cmc_subsample}",
        f"convergence_patience = {l.convergence_patience}",
        f'normalization = "{l.normalization}"',
        "",
        "[protocol]",
        f"splits = {p.splits}",
        f"fraction = {p.fraction}",
        f"threads = {p.threads}",
        "methods = [" + ", ".join(f'"{m}"' for m in p.methods) + "]",
        f'multi_mode = "{p.multi_mode}"',
        f"k_max = {p.k_max}",
        f"min_pairs = {p.min_pairs}",
        "",
    ]
    return "\n".join(lines)


def _parse_grid(d: dict) -> GridSpec:
    return GridSpec(
        image_w=int(d["image_w"]), image_h=int(d["image_h"]),
        patch_w=int(d["patch_w"]), patch_h=int(d["patch_h"]),
        stride_x=int(d["stride_x"]), stride_y=int(d["stride_y"]),
    )


def parse_config(text: str) -> PipelineConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"config parse error: {exc}") from None
    cfg = PipelineConfig()
    if "grid" in data:
        if "probe" in data["grid"]:
            cfg = replace(cfg, probe_grid=_parse_grid(data["grid"]["probe"]))
        if "gallery" in data["grid"]:
            cfg = replace(cfg, gallery_grid=_parse_grid(data["grid"]["gallery"]))
    if "features" in data:
        d = data["features"]
        pca = int(d.get("pca_dim", 34))
        cfg = replace(cfg, features=FeatureConfig(
            color_space=ColorSpace(d.get("color_space", "LAB")),
            bins_per_channel=int(d.get("bins_per_channel", 16)),
            grad_orient_bins=int(d.get("grad_orient_bins", 8)),
            grad_cells=tuple(int(x) for x in d.get("grad_cells", (2, 2))),
            pca_dim=pca if pca > 0 else None,
        ))
    if "metric" in data:
        d = data["metric"]
        ridge = float(d.get("ridge", -1.0))
        cfg = replace(
            cfg,
            metric_mode=MetricMode(d.get("mode", "SHARED")),
            ridge=None if ridge < 0 else ridge,
        )
    if "learn" in data:
        d = data["learn"]
        cfg = replace(cfg, learn=LearnConfig(
            epsilon=float(d.get("epsilon", 0.2)),
            n_cmc=int(d.get("n_cmc", 5)),
            structures_per_iter=int(d.get("structures_per_iter", 20)),
            candidate_ranges=(int(d.get("range_lo", 26)), int(d.get("range_hi", 32))),
            max_iters=int(d.get("max_iters", 300)),
            use_eval_module=bool(d.get("use_eval_module", False)),
            t_c=float(d.get("t_c", 0.05)),
            t_d=int(d.get("t_d", 32)),
            link_cmc_subsample=int(d.get("link_cmc_subsample", 32)),
            convergence_patience=int(d.get("convergence_patience", 20)),
            normalization=d.get("normalization", "row"),
        ))
    if "protocol" in data:
        d = data["protocol"]
        cfg = replace(cfg, protocol=ProtocolConfig(
            splits=int(d.get("splits", 10)),
            fraction=float(d.get("fraction", 0.5)),
            threads=int(d.get("threads", 1)),
            methods=tuple(d.get("methods", list(ALL_METHODS))),
            multi_mode=d.get("multi_mode", "off"),
            k_max=int(d.get("k_max", 6)),
            min_pairs=int(d.get("min_pairs", 10)),
        ))
    return cfg


def load_config(path: Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return parse_config(Path(path).read_text())


def save_config(cfg: PipelineConfig, path: Path) -> None:
    Path(path).write_text(dump_config(cfg))
