"""Run configuration: a flat ``key = value`` text format mirrored by CLI flags.

A config file holds one ``key = value`` per line (``#`` starts a comment).
Every key is also a CLI flag (``label_smoothing`` <-> ``--label-smoothing``)
and flags override file values. :class:`RunManifest` is the validated,
typed view of a config; ``manifest.to_config()`` round-trips losslessly.
"""

from dataclasses import dataclass
import hashlib
import json

from . import __version__
from .attacks import AttackConfig
from .data import BlobSpec, ImbalancedBlobSpec, circle_means
from .losses import BonusSpec, LossSpec, LossSpecError
from .network import TrainConfig
from .ood import INDICATORS


class ConfigError(ValueError):
    pass


def _floats(text):
    text = str(text).strip()
    return tuple(float(t) for t in text.split(",") if t.strip()) if text else ()


def _ints(text):
    return tuple(int(v) for v in _floats(text))


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    t = str(text).strip()
    return None if t in ("", "none") else float(t)


def _opt_int(text):
    t = str(text).strip()
    return None if t in ("", "none") else int(t)


# key -> (parser, default, help)
FIELDS = {
    "loss": (str, "ce", "ce | el | focal | hfl | mse | mse_mirror"),
    "bonus": (str, "", "none | normal | conservative | aggressive (el only; default normal)"),
    "le": (_opt_float, None, "where the log curve ends, conservative bonus"),
    "bonus_threshold": (_opt_float, None, "aggressive bonus threshold (default 0.5)"),
    "gamma": (_opt_float, None, "focal exponent gamma_f (focal, hfl)"),
    "phi": (_opt_float, None, "halting probability (hfl, default 0.5)"),
    "label_smoothing": (float, 0.0, "label smoothing epsilon in [0,1) (ce, el)"),
    "mse_norm": (str, "softmax", "softmax | sigmoid (mse families)"),
    "dataset": (str, "blobs", "blobs | imb-blobs | idx"),
    "classes": (int, 3, "number of blob classes"),
    "dim": (int, 2, "blob feature dimension"),
    "per_class": (int, 1250, "points per blob class"),
    "stddev": (float, 1.0, "blob standard deviation"),
    "radius": (float, 3.0, "radius of the circle holding blob centres"),
    "n0": (int, 500, "largest class size for imb-blobs"),
    "imb_ratio": (float, 0.5, "geometric class-size decay for imb-blobs"),
    "idx_images": (str, "", "IDX image file"),
    "idx_labels": (str, "", "IDX label file"),
    "split": (_floats, (0.8, 0.1, 0.1), "train,valid,test fractions"),
    "hidden": (_ints, (64, 64), "hidden layer widths"),
    "lr": (float, 0.05, "base learning rate"),
    "lr_scale": (float, 1.0, "global learning-rate multiplier"),
    "momentum": (float, 0.9, "SGD momentum"),
    "epochs": (int, 200, "training epochs"),
    "batch_size": (int, 64, "mini-batch size"),
    "seed": (int, 0, "master seed"),
    "class_weights": (str, "", "'balanced' or comma list of per-class weights"),
    "reweight_start": (_opt_int, None, "first epoch with class weights active"),
    "schedule": (str, "", "lr steps as epoch:multiplier,..."),
    "diagnostics": (str, "", "comma list of margins,energy,ece,ood,attack,probe"),
    "subset": (str, "train", "split used for margins/energy"),
    "margin_bin": (float, 1.0, "margin histogram bin width"),
    "ece_bins": (int, 15, "ECE bins"),
    "indicator": (str, "all", "OOD indicator or 'all'"),
    "ood_center": (_floats, (), "OOD blob centre (default: origin)"),
    "ood_shift": (_floats, (), "OOD set = test inputs translated by this vector (overrides the blob)"),
    "ood_stddev": (_opt_float, None, "OOD blob stddev (default: stddev)"),
    "ood_count": (int, 375, "OOD blob size"),
    "ood_idx_images": (str, "", "IDX image file used as the OOD set"),
    "attack": (str, "fgsm", "fgsm | pgd"),
    "norm": (str, "linf", "linf | l2"),
    "eps": (_floats, (0.0, 0.25, 0.5, 0.75, 1.0), "attack budgets"),
    "steps": (int, 40, "PGD steps"),
    "step_size": (_opt_float, None, "PGD step size (default eps/10)"),
    "random_start": (_bool, True, "PGD random start"),
    "attack_loss": (str, "ce", "ce | train: loss the attacker ascends"),
    "clip_lo": (_opt_float, None, "lowest feature value (idx default 0, blobs unbounded)"),
    "clip_hi": (_opt_float, None, "highest feature value (idx default 1, blobs unbounded)"),
    "probe_balanced": (_bool, False, "class-balanced sampling when probing"),
    "probe_epochs": (int, 20, "probe epochs"),
}

DIAGNOSTICS = ("margins", "energy", "ece", "ood", "attack", "probe")


def parse_value(key, raw):
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    parser = FIELDS[key][0]
    if not isinstance(raw, str):
        if isinstance(raw, (list, tuple)):
            raw = ",".join(str(v) for v in raw)
        elif raw is None:
            raw = ""
        else:
            raw = str(raw)
    try:
        return parser(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None


def format_value(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def defaults():
    return {k: v[1] for k, v in FIELDS.items()}


def read_config_text(text):
    """Parse ``key = value`` lines into a {key: raw string} dict."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in ("run_id", "tool_version"):
            continue
        out[key] = value
    return out


def read_config_file(path):
    with open(path) as f:
        text = f.read()
    if text.lstrip().startswith("{"):
        data = json.loads(text)
        data = data.get("config", data)
        return {k: v for k, v in data.items() if k in FIELDS}
    return read_config_text(text)


def write_config_text(config):
    return "".join(f"{k} = {format_value(config[k])}\n" for k in FIELDS)


@dataclass
class RunManifest:
    config: dict

    @classmethod
    def from_config(cls, raw):
        cfg = defaults()
        for key, value in raw.items():
            cfg[key] = parse_value(key, value)
        m = cls(cfg)
        m.validate()
        return m

    def to_config(self):
        return dict(self.config)

    def replace(self, **changes):
        cfg = self.to_config()
        for k, v in changes.items():
            cfg[k] = parse_value(k, v)
        m = RunManifest(cfg)
        m.validate()
        return m

    def validate(self):
        try:
            self.loss_spec()
            self.train_config()
        except LossSpecError as exc:
            raise ConfigError(str(exc)) from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        c = self.config
        if c["dataset"] not in ("blobs", "imb-blobs", "idx"):
            raise ConfigError(f"unknown dataset {c['dataset']!r}")
        if c["dataset"] == "idx" and not (c["idx_images"] and c["idx_labels"]):
            raise ConfigError("dataset idx needs idx_images and idx_labels")
        if len(c["split"]) != 3:
            raise ConfigError("split needs three fractions")
        bad = set(self.diagnostics) - set(DIAGNOSTICS)
        if bad:
            raise ConfigError(f"unknown diagnostics {sorted(bad)}")
        if c["indicator"] != "all" and c["indicator"] not in INDICATORS:
            raise ConfigError(f"unknown indicator {c['indicator']!r}")
        if c["subset"] not in ("train", "valid", "test"):
            raise ConfigError("subset must be train, valid or test")
        if c["ece_bins"] < 1:
            raise ConfigError("ece_bins must be >= 1")
        try:
            self.attack_config(0.0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def run_id(self):
        blob = json.dumps(self.to_json_config(), sort_keys=True).encode()
        return "run-" + hashlib.sha256(blob).hexdigest()[:12]

    @property
    def seed(self):
        return self.config["seed"]

    @property
    def diagnostics(self):
        return tuple(d.strip() for d in self.config["diagnostics"].split(",") if d.strip())

    def loss_spec(self):
        c = self.config
        family = c["loss"]
        kind = c["bonus"] or ("normal" if family == "el" else "none")
        bonus = BonusSpec(kind, le=c["le"], threshold=c["bonus_threshold"])
        return LossSpec(family, bonus=bonus, gamma_f=c["gamma"], phi=c["phi"],
                        label_smoothing=c["label_smoothing"], normalization=c["mse_norm"])

    def layer_dims(self, n_in, n_classes):
        return (n_in,) + tuple(self.config["hidden"]) + (n_classes,)

    def class_weight_map(self, train_counts=None):
        text = self.config["class_weights"].strip()
        if not text:
            return None
        if text == "balanced":
            if train_counts is None:
                return None
            total, k = sum(train_counts), len(train_counts)
            return {c: total / (k * n) for c, n in enumerate(train_counts) if n > 0}
        return {c: w for c, w in enumerate(_floats(text))}

    def schedule(self):
        steps = []
        for item in self.config["schedule"].split(","):
            if item.strip():
                epoch, mult = item.split(":")
                steps.append((int(epoch), float(mult)))
        return tuple(steps)

    def train_config(self, train_counts=None):
        c = self.config
        return TrainConfig(lr=c["lr"], lr_scale=c["lr_scale"], momentum=c["momentum"],
                           epochs=c["epochs"], batch_size=c["batch_size"], seed=c["seed"],
                           class_weights=self.class_weight_map(train_counts),
                           reweight_start_epoch=c["reweight_start"], schedule=self.schedule())

    def blob_spec(self):
        c = self.config
        means = circle_means(c["classes"], c["dim"], c["radius"])
        stds = (c["stddev"],) * c["classes"]
        if c["dataset"] == "imb-blobs":
            return ImbalancedBlobSpec(means, stds, c["n0"], c["imb_ratio"], c["seed"], c["split"])
        return BlobSpec(means, stds, (c["per_class"],) * c["classes"], c["seed"], c["split"])

    def clip_range(self):
        c = self.config
        lo_default, hi_default = (0.0, 1.0) if c["dataset"] == "idx" else (float("-inf"), float("inf"))
        lo = lo_default if c["clip_lo"] is None else c["clip_lo"]
        hi = hi_default if c["clip_hi"] is None else c["clip_hi"]
        return lo, hi

    def attack_config(self, epsilon):
        c = self.config
        return AttackConfig(method=c["attack"], norm=c["norm"], epsilon=epsilon,
                            steps=c["steps"], step_size=c["step_size"],
                            random_start=c["random_start"], clip=self.clip_range(),
                            seed=c["seed"], attack_loss=c["attack_loss"])

    def to_json_config(self):
        return {k: format_value(v) for k, v in self.config.items()}

    def to_json(self):
        return {"run_id": self.run_id, "tool_version": __version__,
                "config": self.to_json_config()}
