"""Flat key=value run configuration shared by the CLI subcommands.

A config file holds `key = value` lines with `#` comments. Unknown keys are
rejected. Command-line flags override file values, and every run writes its
fully resolved config next to its outputs.
"""

from pathlib import Path

from .dsp import DspConfig
from .errors import InvalidConfig
from .losses import LossWeights
from .model import ArchConfig
from .train import TrainConfig


def _parse_bool(s):
    low = str(s).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s):
    return tuple(int(tok) for tok in str(s).replace(",", " ").split())


def _parse_frames(s):
    if str(s).strip().lower() == "auto":
        return "auto"
    return int(s)


def _parse_pooling(s):
    low = str(s).strip().lower()
    if low in ("none", "-"):
        return "none"
    if low in ("mp", "ap", "es", "at"):
        return low
    raise ValueError(f"pooling must be mp/ap/es/at/none, got {s!r}")


# key -> (parser, default)
KNOWN_KEYS = {
    # frontend
    "frame_len_ms": (float, 40.0),
    "hop_ms": (float, 20.0),
    "n_mels": (int, 64),
    "sample_rate": (int, 16000),
    "log_floor": (float, 1e-10),
    # architecture
    "n_frames": (_parse_frames, 500),
    "shared_channels": (int, 128),
    "scene_channels": (int, 256),
    "gru_hidden": (int, 32),
    "fc_hidden": (int, 32),
    "n_scenes": (int, 4),
    "n_events": (int, 25),
    "scale_factor": (float, 1.0),
    "freq_pools": (_parse_int_list, (8, 2, 2)),
    "scene_time_pool": (int, 25),
    # training
    "mode": (str, "mtl-weak"),
    "pooling": (_parse_pooling, "at"),
    "lr": (float, 1e-3),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
    "rectified": (_parse_bool, True),
    "epochs": (int, 10),
    "batch_size": (int, 8),
    "seed": (int, 0),
    "grad_clip": (float, 5.0),
    "threshold": (float, 0.5),
    "eval_fraction": (float, 0.278),
    # loss weights
    "alpha": (float, 0.001),
    "beta": (float, 1.0),
    "gamma": (float, 0.5),
    "zeta": (float, 0.05),
    # synthesis
    "clip_seconds": (float, 10.0),
}


class RunConfig:
    """Resolved configuration: defaults, then file values, then overrides."""

    def __init__(self, values=None):
        self.values = {k: default for k, (_, default) in KNOWN_KEYS.items()}
        if values:
            for k, v in values.items():
                self.set(k, v)

    def set(self, key, raw):
        if key not in KNOWN_KEYS:
            raise InvalidConfig(f"unknown config key {key!r}")
        parser, _ = KNOWN_KEYS[key]
        try:
            self.values[key] = parser(raw) if isinstance(raw, str) else raw
        except (ValueError, TypeError) as exc:
            raise InvalidConfig(f"bad value for {key!r}: {exc}") from None

    def __getitem__(self, key):
        return self.values[key]

    def dsp_config(self) -> DspConfig:
        v = self.values
        return DspConfig(
            frame_len_ms=v["frame_len_ms"],
            hop_ms=v["hop_ms"],
            n_mels=v["n_mels"],
            sample_rate=v["sample_rate"],
            log_floor=v["log_floor"],
        )

    def arch_config(self, n_frames=None) -> ArchConfig:
        v = self.values
        frames = n_frames if n_frames is not None else v["n_frames"]
        if frames == "auto":
            raise InvalidConfig("n_frames=auto needs feature files to infer from")
        return ArchConfig(
            n_mels=v["n_mels"],
            n_frames=int(frames),
            shared_channels=v["shared_channels"],
            scene_channels=v["scene_channels"],
            gru_hidden=v["gru_hidden"],
            fc_hidden=v["fc_hidden"],
            n_scenes=v["n_scenes"],
            n_events=v["n_events"],
            scale_factor=v["scale_factor"],
            freq_pools=v["freq_pools"],
            scene_time_pool=v["scene_time_pool"],
        )

    def loss_weights(self) -> LossWeights:
        v = self.values
        return LossWeights(alpha=v["alpha"], beta=v["beta"], gamma=v["gamma"], zeta=v["zeta"])

    def train_config(self) -> TrainConfig:
        v = self.values
        pooling = None if v["pooling"] == "none" else v["pooling"]
        return TrainConfig(
            mode=v["mode"],
            pooling=pooling,
            loss_weights=self.loss_weights(),
            lr=v["lr"],
            beta1=v["beta1"],
            beta2=v["beta2"],
            eps=v["eps"],
            rectified=v["rectified"],
            epochs=v["epochs"],
            batch_size=v["batch_size"],
            seed=v["seed"],
            grad_clip=v["grad_clip"],
            threshold=v["threshold"],
        )

    def dump(self) -> str:
        lines = []
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, tuple):
                val = ",".join(str(x) for x in val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"


def parse_config_file(path) -> dict:
    """Read `key = value` lines; returns raw string values keyed by name."""
    path = Path(path)
    if not path.exists():
        raise InvalidConfig(f"no such config file: {path}")
    raw = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise InvalidConfig(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def load_run_config(config_path=None, overrides=None) -> RunConfig:
    cfg = RunConfig()
    if config_path is not None:
        for k, v in parse_config_file(config_path).items():
            cfg.set(k, v)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg.set(k, v)
    return cfg
