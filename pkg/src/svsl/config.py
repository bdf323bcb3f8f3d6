"""Strict INI experiment configuration.

Sections and keys (all optional unless noted; defaults in ``_SCHEMA``)::

    [dataset]  kind = gaussian | idx | csv
               seed, num_classes, dim, sigma, n_train_per_class,
               n_test_per_class, centers = axis | random, radius   (gaussian)
               train_images, train_labels, test_images, test_labels  (idx)
               train_csv, test_csv, label_column, header             (csv)
               normalize = true
    [model]    hidden_widths = 64,64,64,64 ; activation = relu
    [train]    epochs, batch_size, lr, momentum, seed, it_threshold, probe_every
    [loss]     mode = vanilla | svsl ; alpha, gamma, include_final_layer, tpt_only
    [output]   dir

Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from .data import (
    Dataset,
    GaussianMixtureSpec,
    generate_gaussian_mixture,
    normalize_mean_std,
    read_csv,
    read_idx,
)
from .losses import SvslConfig
from .training import ModelSpec, TrainConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s
    return parse


_SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "dataset": {
        "kind": (_choice("gaussian", "idx", "csv"), "gaussian"),
        "seed": (int, 0),
        "num_classes": (int, 4),
        "dim": (int, 10),
        "sigma": (float, 0.4),
        "n_train_per_class": (int, 500),
        "n_test_per_class": (int, 250),
        "centers": (_choice("axis", "random"), "axis"),
        "radius": (float, 1.0),
        "train_images": (str, None),
        "train_labels": (str, None),
        "test_images": (str, None),
        "test_labels": (str, None),
        "train_csv": (str, None),
        "test_csv": (str, None),
        "label_column": (str, "-1"),
        "header": (_bool, False),
        "normalize": (_bool, True),
    },
    "model": {
        "hidden_widths": (_ints, (64, 64, 64, 64)),
        "activation": (_choice("relu", "identity"), "relu"),
    },
    "train": {
        "epochs": (int, 100),
        "batch_size": (int, 64),
        "lr": (float, 0.05),
        "momentum": (float, 0.9),
        "seed": (int, 0),
        "it_threshold": (float, 0.995),
        "probe_every": (int, 1),
    },
    "loss": {
        "mode": (_choice("vanilla", "svsl"), "vanilla"),
        "alpha": (float, 0.0),
        "gamma": (int, 1),
        "include_final_layer": (_bool, True),
        "tpt_only": (_bool, False),
    },
    "output": {
        "dir": (str, "runs/default"),
    },
}

_PATH_KEYS = {"idx": ("train_images", "train_labels", "test_images", "test_labels"),
              "csv": ("train_csv", "test_csv")}


@dataclass
class ExperimentConfig:
    dataset: dict[str, Any]
    model: ModelSpec
    train: TrainConfig
    output_dir: str
    base_dir: Path = Path(".")

    def _path(self, key: str) -> Path:
        p = Path(self.dataset[key])
        return p if p.is_absolute() else self.base_dir / p

    def load_datasets(self) -> tuple[Dataset, Dataset]:
        ds = self.dataset
        if ds["kind"] == "gaussian":
            C, d = ds["num_classes"], ds["dim"]
            if ds["centers"] == "axis":
                if d < C:
                    raise ConfigError("dataset.centers = axis needs dim >= num_classes")
                spec = GaussianMixtureSpec(ds["radius"] * np.eye(C, d), ds["sigma"],
                                           ds["n_train_per_class"], ds["n_test_per_class"], ds["seed"])
            else:
                spec = GaussianMixtureSpec.random_centers(C, d, ds["sigma"], ds["n_train_per_class"],
                                                          ds["n_test_per_class"], ds["seed"], ds["radius"])
            train, test = generate_gaussian_mixture(spec)
        elif ds["kind"] == "idx":
            train = read_idx(self._path("train_images"), self._path("train_labels"), "train")
            test = read_idx(self._path("test_images"), self._path("test_labels"), "test",
                            num_classes=train.num_classes)
        else:
            col = ds["label_column"]
            col = int(col) if re.fullmatch(r"-?\d+", col) else col
            train = read_csv(self._path("train_csv"), col, ds["header"], "train")
            test = read_csv(self._path("test_csv"), col, ds["header"], "test")
            if test.num_classes > train.num_classes:
                raise ConfigError("test split has classes absent from train")
            test = Dataset(test.X, test.y, train.num_classes, "test")
        if ds["normalize"]:
            (train, test), _ = normalize_mean_std(train, test)
        return train, test

    def to_ini(self) -> str:
        """Resolved configuration in the same format, every key explicit."""
        tc = self.train
        dataset = dict(self.dataset)
        for key in _PATH_KEYS.get(dataset["kind"], ()):
            dataset[key] = str(self._path(key).resolve())
        values = {
            "dataset": dataset,
            "model": {"hidden_widths": ",".join(str(w) for w in self.model.hidden_widths),
                      "activation": self.model.activation},
            "train": {"epochs": tc.epochs, "batch_size": tc.batch_size, "lr": tc.learning_rate,
                      "momentum": tc.momentum, "seed": tc.seed, "it_threshold": tc.it_threshold,
                      "probe_every": tc.probe_every},
            "loss": {"mode": tc.loss_mode, "alpha": tc.svsl.alpha, "gamma": tc.svsl.gamma,
                     "include_final_layer": tc.svsl.include_final_layer, "tpt_only": tc.svsl.tpt_only},
            "output": {"dir": self.output_dir},
        }
        out = io.StringIO()
        for section, keys in _SCHEMA.items():
            out.write(f"[{section}]\n")
            for key in keys:
                v = values[section].get(key)
                if v is None:
                    continue
                if isinstance(v, bool):
                    v = "true" if v else "false"
                elif isinstance(v, float):
                    v = repr(v)
                out.write(f"{key} = {v}\n")
            out.write("\n")
        return out.getvalue()


def _line_of(text: str, section: str, key: Optional[str] = None) -> int:
    current = None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.fullmatch(r"\[(.+)\]", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n
        elif current == section and key is not None and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return n
    return 0


def parse_config(text: str, base_dir: Path = Path("."), source: str = "<config>",
                 check_paths: bool = True) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    raw: dict[str, dict[str, Any]] = {s: {k: d for k, (_, d) in keys.items()} for s, keys in _SCHEMA.items()}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{source}:{_line_of(text, section)}: unknown section [{section}]")
        for key, value in cp.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{source}:{_line_of(text, section, key)}: unknown key {section}.{key}")
            parse, _ = _SCHEMA[section][key]
            try:
                raw[section][key] = parse(value)
            except ValueError as exc:
                raise ConfigError(
                    f"{source}:{_line_of(text, section, key)}: bad value for {section}.{key}: {exc}") from None

    ds = raw["dataset"]
    for key in _PATH_KEYS.get(ds["kind"], ()):
        if not ds[key]:
            raise ConfigError(f"{source}: dataset.{key} is required for dataset.kind = {ds['kind']}")
        p = Path(ds[key])
        p = p if p.is_absolute() else base_dir / p
        if check_paths and not p.is_file():
            raise ConfigError(f"{source}:{_line_of(text, 'dataset', key)}: dataset.{key}: no such file {p}")

    t, lo = raw["train"], raw["loss"]
    try:
        svsl = SvslConfig(lo["alpha"], lo["gamma"], lo["include_final_layer"], lo["tpt_only"])
        train = TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], learning_rate=t["lr"],
                            momentum=t["momentum"], seed=t["seed"], loss_mode=lo["mode"], svsl=svsl,
                            it_threshold=t["it_threshold"], probe_every=t["probe_every"])
        model = ModelSpec(tuple(raw["model"]["hidden_widths"]), raw["model"]["activation"])
        if not model.hidden_widths or min(model.hidden_widths) < 1:
            raise ValueError("model.hidden_widths needs at least one positive width")
        if train.loss_mode == "svsl":
            svsl.layer_range(model.num_layers())
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return ExperimentConfig(ds, model, train, raw["output"]["dir"], base_dir)


def load_config(path, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path.parent, str(path), check_paths)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))
