"""Training and evaluation orchestration.

One optimizer step per batch: student forward on the raw image, teacher
forward on a perturbed copy, flag-gated losses, backward, AdamW, EMA.
Per-step losses and anchor statistics stream to a CSV; held-out metrics
go to a second CSV per epoch. Runs are bit-reproducible for a fixed
(config, seed) because every random draw is keyed by (seed, purpose,
step) and the tape is single-threaded.
"""

import csv
import dataclasses
import os
import time
from dataclasses import dataclass

import numpy as np

from . import boxops, checkpoint, data, losses, metrics, model
from . import teacher as tch
from . import tensor as T
from .errors import ConfigError, DataError, NumericError
from .rng import STREAM_ORDER, STREAM_PERTURB, rng_for

STEP_SCHEMA = "boxseg-step-v1"
EPOCH_SCHEMA = "boxseg-epoch-v1"
EVAL_SCHEMA = "boxseg-eval-v1"

STEP_COLUMNS = ["step", "epoch", "timestamp", "seed", "loss_total", "loss_ibox",
                "loss_cla", "loss_px", "loss_mask", "n_object", "n_background",
                "cos_object", "cos_background"]
EVAL_COLUMNS = ["name", "mdice", "miou", "precision", "recall", "f1",
                "hausdorff", "rectangularity", "dice_mask", "dice_boxfill"]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    ema_momentum: float = 0.99
    ibox: bool = True
    cla: bool = True
    px: bool = True
    swap_confusion: bool = True
    decouple: bool = True
    seed: int = 0
    input_size: int = 64
    stage_channels: tuple = (8, 16, 32, 64)
    reduced_channels: int = 8
    eval_every: int = 1
    train_manifest: str = ""
    val_manifest: str = ""
    out_dir: str = "run"
    resume: str = ""

    def loss_flags(self):
        return losses.LossFlags(ibox=self.ibox, cla=self.cla, px=self.px,
                                swap_confusion=self.swap_confusion,
                                decouple=self.decouple)

    def model_config(self):
        return model.ModelConfig(input_size=self.input_size,
                                 stage_channels=self.stage_channels,
                                 reduced_channels=self.reduced_channels,
                                 seed=self.seed)


def _parse_value(name, raw, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(v) for v in raw.split(","))
        return raw
    except ValueError as e:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r}") from e


def parse_config(path):
    """Read a line-oriented 'key = value' config file into a TrainConfig."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    types = {"learning_rate": float, "weight_decay": float, "ema_momentum": float,
             "batch_size": int, "epochs": int, "seed": int, "input_size": int,
             "reduced_channels": int, "eval_every": int,
             "stage_channels": tuple,
             "ibox": bool, "cla": bool, "px": bool, "swap_confusion": bool,
             "decouple": bool,
             "train_manifest": str, "val_manifest": str, "out_dir": str, "resume": str}
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot open config {path}: {e}") from e
    values = {}
    with fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in fields:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, raw, types[key])
    cfg = TrainConfig(**values)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg):
    if cfg.learning_rate <= 0 or cfg.weight_decay < 0:
        raise ConfigError("learning_rate must be > 0 and weight_decay >= 0")
    if cfg.batch_size < 1 or cfg.epochs < 1:
        raise ConfigError("batch_size and epochs must be >= 1")
    if not 0.0 <= cfg.ema_momentum < 1.0:
        raise ConfigError("ema_momentum must be in [0, 1)")


def apply_flag_overrides(cfg, spec):
    """Ablation overrides like 'cla=0,px=0' on top of a parsed config."""
    flag_names = {"ibox", "cla", "px", "swap_confusion", "decouple"}
    out = dataclasses.replace(cfg)
    if not spec:
        return out
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        key, _, raw = part.partition("=")
        key = key.strip()
        if key not in flag_names:
            raise ConfigError(f"--flags: unknown loss flag {key!r}")
        setattr(out, key, _parse_value(key, raw, bool))
    return out


class AdamW:
    """Decoupled weight decay: theta -= lr * (mhat/(sqrt(vhat)+eps) + wd*theta)."""

    def __init__(self, params, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def step(self, grads):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.values)
            if g.shape != p.values.shape:
                raise NumericError(f"AdamW: grad shape {g.shape} != param {p.values.shape}")
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p.assign_(p.values - self.lr * (mhat / (np.sqrt(vhat) + self.eps)
                                            + self.wd * p.values))

    def state_arrays(self):
        out = {}
        for k in self.params:
            out[f"opt_m/{k}"] = self.m[k]
            out[f"opt_v/{k}"] = self.v[k]
        return out

    def load_state(self, arrays, t):
        self.t = t
        for k in self.params:
            self.m[k] = arrays[f"opt_m/{k}"].copy()
            self.v[k] = arrays[f"opt_v/{k}"].copy()


@dataclass
class TrainResult:
    checkpoint_path: str
    step_log: str
    epoch_log: str
    final_metrics: dict | None


def _save_state(path, cfg, params, teacher_params, opt, step, epoch):
    header = cfg.model_config().header_items()
    header["step"] = str(step)
    header["epoch"] = str(epoch)
    arrays = {}
    for k, p in params.items():
        arrays[f"student/{k}"] = p.values
    for k, p in teacher_params.items():
        arrays[f"teacher/{k}"] = p.values
    arrays.update(opt.state_arrays())
    checkpoint.save_checkpoint(path, header, arrays)


def load_student(ckpt_path):
    """(model config, student params) from a checkpoint."""
    header, arrays = checkpoint.load_checkpoint(ckpt_path)
    mc = model.ModelConfig.from_header(header)
    params = {}
    for key, arr in arrays.items():
        group, _, name = key.partition("/")
        if group == "student":
            params[name] = T.parameter(arr.copy())
    if not params:
        raise DataError(f"{ckpt_path}: no student parameters found")
    return mc, params


def _load_teacher(arrays):
    return {key.partition("/")[2]: T.DiffTensor(arr.copy())
            for key, arr in arrays.items() if key.startswith("teacher/")}


class _CsvLog:
    def __init__(self, path, schema, columns):
        exists = os.path.exists(path)
        self.fh = open(path, "a", encoding="utf-8", newline="")
        self.writer = csv.writer(self.fh)
        if not exists:
            self.fh.write(f"# schema: {schema}\n")
            self.writer.writerow(columns)
            self.fh.flush()

    def row(self, values):
        self.writer.writerow(values)
        self.fh.flush()

    def close(self):
        self.fh.close()


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        if np.isnan(x):
            return "nan"
        return f"{x:.10g}"
    return x


def read_log(path):
    """Rows of a boxseg CSV as dicts of floats/strings, comments skipped."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for row in csv.DictReader(lines):
        parsed = {}
        for k, v in row.items():
            try:
                parsed[k] = float(v)
            except (TypeError, ValueError):
                parsed[k] = v
        rows.append(parsed)
    return rows


def evaluate_params(params, mc, samples, debug_identity=False):
    """Per-image metric rows plus a nan-aware mean aggregate."""
    rows = []
    for sample in samples:
        if sample.mask is None:
            continue
        boxes = sample.boxes if sample.boxes is not None else data.mask_to_boxes(sample.mask)
        if debug_identity:
            pred = sample.mask.astype(np.float64)
        else:
            with T.no_grad():
                m, _ = model.forward(params, mc, sample.image)
            pred = m.values
        scores = metrics.evaluate_sample(pred, sample.mask, boxes)
        scores["name"] = sample.name
        rows.append(scores)
    if not rows:
        raise DataError("no mask-annotated samples to evaluate")
    agg = {"name": "AGGREGATE"}
    for col in EVAL_COLUMNS[1:]:
        vals = np.array([r[col] for r in rows], dtype=np.float64)
        good = vals[~np.isnan(vals)]
        agg[col] = float(good.mean()) if good.size else float("nan")
    return rows, agg


def train(cfg):
    """Run training per the config; returns paths and final held-out metrics."""
    samples = data.load_dataset(cfg.train_manifest)
    mc = cfg.model_config()
    for s in samples:
        if s.image.shape != (3, mc.input_size, mc.input_size):
            raise DataError(f"{s.name}: image shape {s.image.shape} does not match "
                            f"input_size {mc.input_size}")
    val_samples = data.load_dataset(cfg.val_manifest) if cfg.val_manifest else None

    params = model.init_params(mc)
    teacher_params = model.clone_params(params, requires_grad=False)
    opt = AdamW(params, cfg.learning_rate, cfg.weight_decay)
    flags = cfg.loss_flags()
    step = 0
    start_epoch = 1

    if cfg.resume:
        header, arrays = checkpoint.load_checkpoint(cfg.resume)
        saved_mc = model.ModelConfig.from_header(header)
        if saved_mc != mc:
            raise ConfigError(f"resume: checkpoint model config {saved_mc} != {mc}")
        for k, p in params.items():
            p.assign_(arrays[f"student/{k}"])
        teacher_params = _load_teacher(arrays)
        step = int(header["step"])
        start_epoch = int(header["epoch"]) + 1
        opt.load_state(arrays, step)

    os.makedirs(cfg.out_dir, exist_ok=True)
    step_log = _CsvLog(os.path.join(cfg.out_dir, "steps.csv"), STEP_SCHEMA, STEP_COLUMNS)
    epoch_log = _CsvLog(os.path.join(cfg.out_dir, "epochs.csv"), EPOCH_SCHEMA,
                        ["epoch", "timestamp", "seed"] + EVAL_COLUMNS[1:])
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.bsl")

    final_agg = None
    try:
        for epoch in range(start_epoch, cfg.epochs + 1):
            order = rng_for(STREAM_ORDER, cfg.seed, epoch).permutation(len(samples))
            for lo in range(0, len(order), cfg.batch_size):
                batch = [samples[i] for i in order[lo:lo + cfg.batch_size]]
                step += 1
                step_stats = _run_step(batch, params, teacher_params, mc, flags,
                                       opt, cfg, step)
                step_log.row([step, epoch, f"{time.time():.3f}", cfg.seed]
                             + [_fmt(step_stats[k]) for k in STEP_COLUMNS[4:]])
            if val_samples and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                _, agg = evaluate_params(params, mc, val_samples)
                epoch_log.row([epoch, f"{time.time():.3f}", cfg.seed]
                              + [_fmt(agg[c]) for c in EVAL_COLUMNS[1:]])
                final_agg = agg
            _save_state(ckpt_path, cfg, params, teacher_params, opt, step, epoch)
    finally:
        step_log.close()
        epoch_log.close()

    return TrainResult(checkpoint_path=ckpt_path,
                       step_log=os.path.join(cfg.out_dir, "steps.csv"),
                       epoch_log=os.path.join(cfg.out_dir, "epochs.csv"),
                       final_metrics=final_agg)


def _run_step(batch, params, teacher_params, mc, flags, opt, cfg, step):
    """One optimizer step over a batch; returns the step-log statistics."""
    sums = {k: 0.0 for k in ("loss_ibox", "loss_cla", "loss_px", "loss_mask")}
    n_box = 0
    n_mask = 0
    anchor_rows = []
    size = mc.input_size

    with T.Tape() as tape:
        totals = []
        for i, sample in enumerate(batch):
            if sample.boxes is not None:
                b = boxops.boxes_to_mask(sample.boxes, size, size)
                prng = rng_for(STREAM_PERTURB, cfg.seed, step, i)
                perturbed = tch.perturb_input(sample.image, prng)
                m_tea, f_tea = model.forward_teacher(teacher_params, mc, perturbed)
                m, f = model.forward(params, mc, sample.image)
                anchors = None
                if flags.cla:
                    sel = tch.select_features(f_tea, b, m_tea)
                    anchors = tch.make_anchors(sel, f_tea)
                    cos_obj, cos_bgd = tch.anchor_cosine_stats(sel, anchors)
                    anchor_rows.append((sel.n_object, sel.n_background, cos_obj, cos_bgd))
                bundle, _ = losses.total_loss(m, f, b, m_tea, f_tea, flags, anchors)
                totals.append(bundle.total)
                sums["loss_ibox"] += bundle.ibox.item()
                sums["loss_cla"] += bundle.cla.item()
                sums["loss_px"] += bundle.px.item()
                n_box += 1
            else:
                m, _ = model.forward(params, mc, sample.image)
                loss = T.soft_dice(m, T.constant(sample.mask))
                totals.append(loss)
                sums["loss_mask"] += loss.item()
                n_mask += 1

        batch_total = totals[0]
        for t in totals[1:]:
            batch_total = T.add(batch_total, t)
        batch_total = T.scale(batch_total, 1.0 / len(totals))

        if not np.isfinite(batch_total.item()):
            names = [s.name for s in batch]
            raise NumericError(
                f"non-finite loss at step {step} (seed {cfg.seed}); batch: {names}")
        tape.backward(batch_total)

    grads = {k: p.grad for k, p in params.items()}
    opt.step(grads)
    for p in params.values():
        p.zero_grad()
    tch.ema_update(teacher_params, params, cfg.ema_momentum)

    stats = {
        "loss_total": batch_total.item(),
        "loss_ibox": sums["loss_ibox"] / n_box if n_box else float("nan"),
        "loss_cla": sums["loss_cla"] / n_box if n_box else float("nan"),
        "loss_px": sums["loss_px"] / n_box if n_box else float("nan"),
        "loss_mask": sums["loss_mask"] / n_mask if n_mask else float("nan"),
    }
    if anchor_rows:
        arr = np.array(anchor_rows, dtype=np.float64)
        stats["n_object"] = float(arr[:, 0].mean())
        stats["n_background"] = float(arr[:, 1].mean())
        valid_cos = arr[~np.isnan(arr[:, 2])]
        stats["cos_object"] = float(valid_cos[:, 2].mean()) if valid_cos.size else float("nan")
        stats["cos_background"] = float(valid_cos[:, 3].mean()) if valid_cos.size else float("nan")
    else:
        stats.update(n_object=float("nan"), n_background=float("nan"),
                     cos_object=float("nan"), cos_background=float("nan"))
    return stats


def evaluate_checkpoint(ckpt_path, manifest_path, out_csv, debug_identity=False):
    """Metrics CSV: one row per mask-annotated image plus an aggregate row."""
    mc, params = load_student(ckpt_path)
    samples = data.load_dataset(manifest_path)
    rows, agg = evaluate_params(params, mc, samples, debug_identity=debug_identity)
    log = _CsvLog(out_csv, EVAL_SCHEMA, EVAL_COLUMNS)
    try:
        for row in rows + [agg]:
            log.row([_fmt(row[c]) for c in EVAL_COLUMNS])
    finally:
        log.close()
    return agg


def export_maps(ckpt_path, image_path, out_dir):
    """PGM dumps of the pipeline maps for one image.

    Boxes come from the sibling '<stem>.boxes.txt' annotation. Writes the
    prediction, preliminary proxy, swapped proxy, confusion mask, and the
    contrastive map (when the teacher anchors are defined).
    """
    header, arrays = checkpoint.load_checkpoint(ckpt_path)
    mc = model.ModelConfig.from_header(header)
    _, params = load_student(ckpt_path)
    teacher_params = _load_teacher(arrays)

    image = data.load_pnm(image_path)
    if image.ndim != 3:
        raise DataError(f"{image_path}: expected a color PPM image")
    stem = os.path.splitext(image_path)[0]
    boxes_path = stem + ".boxes.txt"
    if not os.path.exists(boxes_path):
        raise DataError(f"export-maps: no box annotation at {boxes_path}")
    boxes = data.load_boxes(boxes_path)
    size = mc.input_size
    b = boxops.boxes_to_mask(boxes, size, size)

    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, os.path.basename(stem))
    written = {}
    with T.no_grad():
        m, f = model.forward(params, mc, image)
        _, prelim = boxops.shape_decouple(m)
        c = boxops.confusion_mask(b)
        proxy = boxops.swap_confusion(prelim, m, c)
        paths = {
            "pred": m.values, "proxy_prelim": prelim.values,
            "proxy": proxy.values, "confusion": c,
        }
        if teacher_params:
            m_tea, f_tea = model.forward_teacher(teacher_params, mc, image)
            sel = tch.select_features(f_tea, b, m_tea)
            anchors = tch.make_anchors(sel, f_tea)
            if anchors.valid:
                paths["contrast"] = tch.contrastive_map(f, anchors).values
    for name, arr in paths.items():
        path = f"{base}.{name}.pgm"
        data.save_pgm(path, arr)
        written[name] = path
    return written
