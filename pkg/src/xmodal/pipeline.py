"""Training loop, evaluation harness, inference, and configuration.

The forward pass per sample: coarse depth for each modality, alignment of
the thermal prediction into the RGB view (geometric warp/splat when the
cross-modal transform is enabled, naive resize otherwise), the confidence
map (constant 0.5 when the predictor is ablated), and dual-branch fusion.
Losses follow the detach rules of the losses module; all three networks
update jointly every step.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dataio, losses, metrics, networks
from .autodiff import Tensor
from .dataio import DataFormatError, SampleRecord
from .geometry import CameraRig, DepthMap, splat_depth_tensor, resample_image, warp_coords_thr_to_rgb
from .networks import (CoarseDepthNetConfig, ConfidenceNetConfig, FusionNetConfig,
                       Params, coarse_forward, confidence_forward, fusion_forward)

METHODS = ("rgb", "thr", "fused")
SCENARIO_ORDER = ("day", "night", "rain", "all")


@dataclass
class Config:
    dataset_root: str = "data"
    out_dir: str = "runs"
    d_min: float = 0.5
    d_max: float = 25.0
    lambda_si: float = 0.5
    beta: float = 0.8
    gamma: float = 0.65
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    base_channels: int = 16
    levels: int = 3
    confidence_channels: int = 16
    feature_channels: int = 32
    heads: int = 2
    token_downsample: int = 4
    use_cmt: bool = True
    use_cpn: bool = True
    use_l_coa: bool = True
    use_l_con: bool = True
    literal_attention_scaling: bool = False
    eval_min_depth: float = 0.5
    eval_max_depth: float = 80.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not (0 < self.d_min < self.d_max):
            raise ValueError("need 0 < d_min < d_max")
        if min(self.lambda_si, self.beta, self.gamma) <= 0:
            raise ValueError("loss weights must be positive")

    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.lambda_si, self.beta, self.gamma)


_BOOL_KEYS = {"use_cmt", "use_cpn", "use_l_coa", "use_l_con", "literal_attention_scaling"}
_INT_KEYS = {"epochs", "batch_size", "seed", "base_channels", "levels",
             "confidence_channels", "feature_channels", "heads", "token_downsample"}
_STR_KEYS = {"dataset_root", "out_dir"}


def parse_config(path) -> Config:
    """Parse line-oriented `key = value` pairs; unknown keys are an error."""
    known = {f.name for f in fields(Config)}
    values: dict[str, object] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read config {path}: {exc}") from exc
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}:{ln}: expected `key = value`")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise DataFormatError(f"{path}:{ln}: unknown key {key!r}")
        try:
            if key in _BOOL_KEYS:
                if value.lower() not in ("true", "false"):
                    raise ValueError("expected true or false")
                values[key] = value.lower() == "true"
            elif key in _INT_KEYS:
                values[key] = int(value)
            elif key in _STR_KEYS:
                values[key] = value
            else:
                values[key] = float(value)
        except ValueError as exc:
            raise DataFormatError(f"{path}:{ln}: bad value for {key}: {exc}") from exc
    try:
        return Config(**values)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


def write_config(path, config: Config) -> None:
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in fields(Config)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- model bundle -------------------------------------------------------------


@dataclass
class PipelineModel:
    coarse_rgb: Params
    coarse_thr: Params
    confidence: Params
    fusion: Params
    cfg_rgb: CoarseDepthNetConfig
    cfg_thr: CoarseDepthNetConfig
    cfg_conf: ConfidenceNetConfig
    cfg_fus: FusionNetConfig

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, params in self.groups().items():
            for name, t in params.items():
                out[f"{prefix}.{name}"] = t
        return out

    def groups(self) -> dict[str, Params]:
        return {"coarse_rgb": self.coarse_rgb, "coarse_thr": self.coarse_thr,
                "confidence": self.confidence, "fusion": self.fusion}

    def count(self) -> int:
        return sum(p.count() for p in self.groups().values())


def build_model(config: Config) -> PipelineModel:
    cfg_rgb = CoarseDepthNetConfig(in_channels=3, d_min=config.d_min, d_max=config.d_max,
                                   base_channels=config.base_channels, levels=config.levels)
    cfg_thr = replace(cfg_rgb, in_channels=1)
    cfg_conf = ConfidenceNetConfig(base_channels=config.confidence_channels)
    cfg_fus = FusionNetConfig(feature_channels=config.feature_channels, heads=config.heads,
                              token_downsample=config.token_downsample,
                              literal_attention_scaling=config.literal_attention_scaling)
    seeds = np.random.SeedSequence(config.seed).generate_state(4)
    return PipelineModel(
        coarse_rgb=networks.init_coarse_params(cfg_rgb, int(seeds[0])),
        coarse_thr=networks.init_coarse_params(cfg_thr, int(seeds[1])),
        confidence=networks.init_confidence_params(cfg_conf, int(seeds[2])),
        fusion=networks.init_fusion_params(cfg_fus, int(seeds[3])),
        cfg_rgb=cfg_rgb, cfg_thr=cfg_thr, cfg_conf=cfg_conf, cfg_fus=cfg_fus,
    )


# -- forward pass -------------------------------------------------------------


@dataclass
class ForwardOutputs:
    d_rgb: Tensor          # [1,H,W]
    d_thr: Tensor          # [1,h,w] in the thermal view
    d_thr_aligned: Tensor  # [1,H,W] in the RGB view (holes are 0)
    thr_valid: np.ndarray  # [H,W]
    i_thr_aligned: np.ndarray
    c_rgb: Tensor          # [1,H,W]
    d_fused: Tensor        # [1,H,W]


def align_thermal(d_thr: Tensor, i_thr: np.ndarray, rig: CameraRig,
                  rgb_hw: tuple[int, int], use_cmt: bool):
    """Bring the thermal prediction and image into the RGB view.

    With the cross-modal transform enabled the prediction is upsampled to
    RGB resolution and forward-splatted through the rig (differentiably);
    the thermal image rides along the same z-buffer winners. Otherwise both
    are naively resized, which ignores the viewpoint change.
    """
    h, w = rgb_hw
    d_up = ad.bilinear_resize(d_thr, h, w)
    i_up = ad.bilinear_resize_array(i_thr, h, w)
    if not use_cmt:
        return d_up, np.ones((h, w), dtype=bool), i_up
    k_up = rig.k_thr.scaled(w / rig.k_thr.width, h / rig.k_thr.height)
    rig_up = CameraRig(k_rgb=rig.k_rgb, k_thr=k_up, e_thr_to_rgb=rig.e_thr_to_rgb)
    d_aligned, valid = splat_depth_tensor(d_up, np.ones((h, w), dtype=bool), rig_up, (h, w))
    coords = warp_coords_thr_to_rgb(
        DepthMap(d_up.data.reshape(h, w), np.ones((h, w), dtype=bool)), rig_up)
    i_aligned, _ = resample_image(i_up, coords, (h, w))
    return d_aligned, valid, i_aligned


def forward_sample(model: PipelineModel, config: Config,
                   sample: SampleRecord) -> ForwardOutputs:
    rgb_hw = sample.i_rgb.shape[1:]
    i_rgb = Tensor(sample.i_rgb)
    d_rgb = coarse_forward(model.coarse_rgb, model.cfg_rgb, i_rgb)
    d_thr = coarse_forward(model.coarse_thr, model.cfg_thr, Tensor(sample.i_thr))
    d_aligned, thr_valid, i_aligned = align_thermal(
        d_thr, sample.i_thr, sample.rig, rgb_hw, config.use_cmt)
    i_aligned_t = Tensor(i_aligned)

    if config.use_cpn:
        c_rgb = confidence_forward(model.confidence, model.cfg_conf, i_rgb, i_aligned_t,
                                   d_rgb, d_aligned,
                                   thr_valid if config.use_cmt else None,
                                   depth_scale=config.d_max)
    else:
        c_rgb = Tensor(np.full((1, *rgb_hw), 0.5))
    c_thr = 1.0 - c_rgb

    d_fused = fusion_forward(model.fusion, model.cfg_fus, i_rgb, i_aligned_t,
                             d_rgb, d_aligned, c_rgb, c_thr,
                             d_min=config.d_min, d_max=config.d_max)
    return ForwardOutputs(d_rgb=d_rgb, d_thr=d_thr, d_thr_aligned=d_aligned,
                          thr_valid=thr_valid, i_thr_aligned=i_aligned,
                          c_rgb=c_rgb, d_fused=d_fused)


def sample_losses(out: ForwardOutputs, config: Config,
                  d_gt: DepthMap) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(coarse, confidence, silog, total) loss tensors for one sample."""
    zero = Tensor(0.0)
    l_coa = losses.coarse_loss(out.d_rgb, out.d_thr_aligned, d_gt,
                               thr_valid=out.thr_valid) if config.use_l_coa else zero
    if config.use_l_con:
        errs = losses.error_maps(d_gt, out.d_rgb, out.d_thr_aligned,
                                 thr_valid=out.thr_valid)
        targets = losses.confidence_targets(errs)
        l_con = losses.confidence_loss(out.c_rgb, targets, errs.valid)
    else:
        l_con = zero
    l_si = losses.silog_loss(out.d_fused, d_gt, config.lambda_si)
    return l_coa, l_con, l_si, losses.total_loss(l_coa, l_con, l_si, config.weights())


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adaptive per-parameter steps from decoupled first/second moment EMAs."""

    def __init__(self, named: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named = dict(named)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(v.shape) for k, v in self.named.items()}
        self.v = {k: np.zeros(v.shape) for k, v in self.named.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.named.items():
            g = p.grad if p.grad is not None else 0.0
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            step = self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.assign_(p.data - step)

    def zero_grad(self) -> None:
        for p in self.named.values():
            p.zero_grad()


# -- training -----------------------------------------------------------------


def _checkpoint_state(model: PipelineModel, config: Config) -> dict[str, np.ndarray]:
    state = {name: t.data for name, t in model.named_tensors().items()}
    state["meta.depth_range"] = np.array([config.d_min, config.d_max])
    state["meta.arch"] = np.array([config.base_channels, config.levels,
                                   config.confidence_channels, config.feature_channels,
                                   config.heads, config.token_downsample,
                                   float(config.literal_attention_scaling)])
    state["meta.flags"] = np.array([float(config.use_cmt), float(config.use_cpn)])
    return state


def config_from_checkpoint(state: dict[str, np.ndarray], base: Config | None = None) -> Config:
    cfg = base or Config()
    rng_ = state["meta.depth_range"]
    arch = state["meta.arch"]
    flags = state["meta.flags"]
    return replace(cfg, d_min=float(rng_[0]), d_max=float(rng_[1]),
                   base_channels=int(arch[0]), levels=int(arch[1]),
                   confidence_channels=int(arch[2]), feature_channels=int(arch[3]),
                   heads=int(arch[4]), token_downsample=int(arch[5]),
                   literal_attention_scaling=bool(arch[6]),
                   use_cmt=bool(flags[0]), use_cpn=bool(flags[1]))


def load_model(ckpt_path, base: Config | None = None) -> tuple[PipelineModel, Config]:
    state = networks.load_checkpoint(ckpt_path)
    config = config_from_checkpoint(state, base)
    model = build_model(config)
    for prefix, params in model.groups().items():
        group_state = {name[len(prefix) + 1:]: arr for name, arr in state.items()
                       if name.startswith(prefix + ".")}
        params.load_state(group_state)
    return model, config


@dataclass
class TrainResult:
    final_checkpoint: Path
    checkpoints: list[Path]
    log_path: Path


def train(config: Config) -> TrainResult:
    """Train all three networks jointly; checkpoints and a loss log per epoch."""
    index = dataio.load_dataset_index(config.dataset_root)
    records = dataio.load_split(index, "train")
    if not records:
        raise DataFormatError("train split is empty")

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(config)
    opt = Adam(model.named_tensors(), lr=config.learning_rate)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xBA7C)))

    log_path = out_dir / "train_log.csv"
    log_rows = ["epoch,loss_coarse,loss_confidence,loss_silog,loss_total"]
    checkpoints: list[Path] = []

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(records))
        sums = np.zeros(4)
        steps = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            opt.zero_grad()
            terms = []
            for i in batch:
                rec = records[i]
                out = forward_sample(model, config, rec)
                terms.append(sample_losses(out, config, rec.d_gt_rgb))
            total = terms[0][3]
            for t in terms[1:]:
                total = total + t[3]
            total = total * (1.0 / len(terms))
            value = total.item()
            if not np.isfinite(value):
                raise RuntimeError(
                    f"non-finite loss {value} at epoch {epoch} step {steps}; aborting")
            total.backward()
            opt.step()
            sums += [float(np.mean([t[k].item() for t in terms])) for k in range(4)]
            steps += 1
        means = sums / max(steps, 1)
        log_rows.append(f"{epoch},{means[0]:.9g},{means[1]:.9g},{means[2]:.9g},{means[3]:.9g}")
        ckpt = out_dir / f"ckpt_epoch_{epoch:03d}.xmd"
        networks.save_checkpoint(ckpt, _checkpoint_state(model, config))
        checkpoints.append(ckpt)

    log_path.write_text("\n".join(log_rows) + "\n", encoding="utf-8")
    return TrainResult(final_checkpoint=checkpoints[-1], checkpoints=checkpoints,
                       log_path=log_path)


# -- evaluation ---------------------------------------------------------------


def _predictions(out: ForwardOutputs) -> dict[str, DepthMap]:
    h, w = out.d_rgb.data.shape[-2:]
    aligned = out.d_thr_aligned.data.reshape(h, w)
    return {
        "rgb": DepthMap.full(out.d_rgb.data.reshape(h, w)),
        "thr": DepthMap(np.where(out.thr_valid, aligned, 0.0), out.thr_valid),
        "fused": DepthMap.full(out.d_fused.data.reshape(h, w)),
    }


def evaluate(config: Config, ckpt_path, split: str,
             debug_identity: bool = False) -> dict[tuple[str, str], metrics.MetricsRecord]:
    """Score the fused depth and both coarse baselines per scenario.

    Returns records keyed by (method, scenario) where scenario includes the
    aggregate group "all"; also writes a CSV next to the checkpoints. With
    debug_identity every prediction is replaced by the ground truth.
    """
    model, config = load_model(ckpt_path, config)
    index = dataio.load_dataset_index(config.dataset_root)
    records = dataio.load_split(index, split)
    if not records:
        raise DataFormatError(f"split {split!r} is empty")

    per_group: dict[tuple[str, str], list[metrics.MetricsRecord]] = {}
    for rec in records:
        preds = ({m: rec.d_gt_rgb for m in METHODS} if debug_identity
                 else _predictions(forward_sample(model, config, rec)))
        for method in METHODS:
            r = metrics.evaluate_depth(preds[method], rec.d_gt_rgb,
                                       config.eval_min_depth, config.eval_max_depth)
            for scenario in (rec.scenario, "all"):
                per_group.setdefault((method, scenario), []).append(r)

    results = {key: metrics.average_records(rs) for key, rs in per_group.items()}
    for scenario in SCENARIO_ORDER[:-1]:
        if ("fused", scenario) not in results:
            print(f"warning: no {scenario!r} samples in split {split!r}; group skipped",
                  file=sys.stderr)

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"metrics_{split}.csv"
    lines = ["method,scenario," + ",".join(metrics.CSV_COLUMNS)]
    for method in METHODS:
        for scenario in SCENARIO_ORDER:
            if (method, scenario) in results:
                lines.append(f"{method},{scenario}," + results[(method, scenario)].csv_row())
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return results


# -- inference ----------------------------------------------------------------


def infer(rgb_path, thr_path, calib_path, ckpt_path, out_path,
          emit_confidence: bool = False) -> Path:
    """Fused depth for one RGB/thermal pair; optional confidence image.

    The confidence map, when requested, lands next to the output with a
    `.conf.pgm` suffix as 8-bit grayscale (value = round(255 * C_RGB)).
    """
    rig = dataio.parse_calibration(calib_path)
    i_rgb = dataio.read_ppm(rgb_path)
    i_thr = dataio.read_pgm8(thr_path)
    if i_rgb.shape[1:] != (rig.k_rgb.height, rig.k_rgb.width):
        raise DataFormatError("rgb image extents do not match calibration")
    if i_thr.shape[1:] != (rig.k_thr.height, rig.k_thr.width):
        raise DataFormatError("thermal image extents do not match calibration")

    model, config = load_model(ckpt_path)
    record = SampleRecord(sample_id="infer", i_rgb=i_rgb, i_thr=i_thr,
                          d_gt_rgb=DepthMap.full(np.ones(i_rgb.shape[1:])),
                          d_gt_thr=DepthMap.full(np.ones(i_thr.shape[1:])),
                          rig=rig, scenario="day")
    out = forward_sample(model, config, record)
    h, w = i_rgb.shape[1:]
    out_path = Path(out_path)
    dataio.write_depth_pgm(out_path, DepthMap.full(out.d_fused.data.reshape(h, w)))
    if emit_confidence:
        conf_path = out_path.with_suffix(".conf.pgm")
        dataio.write_pgm8(conf_path, out.c_rgb.data.reshape(h, w))
    return out_path
