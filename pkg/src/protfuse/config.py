"""Sectioned ``key = value`` run configuration.

A config file holds ``[section]`` headers followed by ``key = value`` lines;
``section.key = value`` also works outside a section.  ``#`` starts a
comment.  Every key must appear in :data:`DEFAULTS`, which also fixes its
type.  Command-line overrides use the dotted form.

The resolved config renders back to the same format (:meth:`RunConfig.dump`)
so a snapshot can be replayed, and :meth:`RunConfig.digest` hashes the
sections a pipeline stage depends on.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .errors import ConfigError

__all__ = ["DEFAULTS", "RunConfig", "load_config", "parse_overrides"]

DEFAULTS: dict[str, dict[str, object]] = {
    "data": {
        "source": "synthetic",          # synthetic | files
        "dir": "",
        "n_proteins": 300, "n_terms": 40, "d_seq": 16, "d_struc": 64, "latent_dim": 8,
        "n_clusters": 8, "cluster_scale": 1.5, "latent_noise": 1.0, "seq_noise": 0.3,
        "struc_noise": 2.0, "map_kind": "permutation", "homophily": 5.0, "ppi_degree": 2.0,
        "n_roots": 3, "max_depth": 4, "second_parent_prob": 0.3, "terms_per_cluster": 2,
        "label_keep": 0.7, "label_noise": 0.1, "d_go": 8, "train_frac": 0.6,
        "valid_frac": 0.2, "min_noedge": 0.98,
    },
    "ot": {"epsilon": 1e-3, "cost_tol": 1e-6, "max_iter": 100_000, "normalize": True},
    "diffusion": {"T": 50, "schedule_shift": 0.008},
    "model": {"d_h": 64, "n_experts": 4, "d_model": 64, "d_edge": 32, "n_heads": 4,
              "n_layers": 2, "classifier_hidden": 128},
    "pretrain": {"steps": 300, "batch_size": 8, "lr": 1e-3, "weight_decay": 1e-12,
                 "p_drop": 0.1, "hops": 2, "fanout_ppi": [4, 2], "fanout_go": [2, 2],
                 "fanout_anno": [4, 2], "max_nodes": 32, "checkpoint_every": 0},
    "finetune": {"steps": 400, "batch_size": 32, "lr": 1e-3, "warmup_frac": 0.1,
                 "weight_decay": 1e-4, "train_encoder": True},
    "eval": {"variant": "full"},        # full | no_cgg | concat
    "run": {"seeds": [0]},
    "bench": {"repeats": 100, "batch_size": 64},
}

CHOICES = {
    ("data", "source"): ("synthetic", "files"),
    ("data", "map_kind"): ("permutation", "identity", "rotation", "random-linear"),
    ("eval", "variant"): ("full", "no_cgg", "concat"),
}


def _parse_value(section, key, raw: str):
    default = DEFAULTS[section][key]
    raw = raw.strip()
    where = f"{section}.{key}"
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [int(x) for x in raw.replace(" ", "").split(",") if x]
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    choices = CHOICES.get((section, key))
    if choices and raw not in choices:
        raise ConfigError(f"{where}: {raw!r} is not one of {', '.join(choices)}")
    return raw


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _split_key(dotted: str, section=None):
    if "." in dotted:
        section, _, key = dotted.partition(".")
    else:
        key = dotted
    section, key = (section or "").strip(), key.strip()
    if section not in DEFAULTS:
        raise ConfigError(f"unknown config section {section!r} (key {dotted!r})")
    if key not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    return section, key


class RunConfig:
    """Resolved values, one dict per section."""

    def __init__(self, values=None):
        self.values = {s: dict(keys) for s, keys in DEFAULTS.items()}
        for s, keys in (values or {}).items():
            for k, v in keys.items():
                s2, k2 = _split_key(f"{s}.{k}")
                self.values[s2][k2] = v
        self._validate()

    def __getitem__(self, section) -> dict:
        return self.values[section]

    def get(self, dotted):
        s, k = _split_key(dotted)
        return self.values[s][k]

    def with_overrides(self, pairs) -> "RunConfig":
        new = {s: dict(keys) for s, keys in self.values.items()}
        for dotted, raw in pairs:
            s, k = _split_key(dotted)
            new[s][k] = _parse_value(s, k, raw) if isinstance(raw, str) else raw
        return RunConfig(new)

    def _validate(self):
        v = self.values
        if not v["run"]["seeds"]:
            raise ConfigError("run.seeds must list at least one seed")
        if v["data"]["source"] == "files" and not v["data"]["dir"]:
            raise ConfigError("data.source = files needs data.dir")
        for section, key in (("pretrain", "steps"), ("finetune", "steps"), ("diffusion", "T"),
                             ("bench", "batch_size"), ("model", "n_experts"), ("model", "d_h")):
            if v[section][key] < 1:
                raise ConfigError(f"{section}.{key} must be >= 1")
        if v["bench"]["repeats"] < 10:
            raise ConfigError("bench.repeats must be >= 10")
        if v["ot"]["epsilon"] <= 0 or v["ot"]["cost_tol"] <= 0:
            raise ConfigError("ot.epsilon and ot.cost_tol must be positive")
        if v["model"]["d_model"] % v["model"]["n_heads"]:
            raise ConfigError("model.d_model must be divisible by model.n_heads")
        fan = [len(v["pretrain"][f"fanout_{r}"]) for r in ("ppi", "go", "anno")]
        if min(fan) < 1 or len(set(fan)) != 1:
            raise ConfigError("pretrain fanout lists must be non-empty and equally long")

    def dump(self, sections=None) -> str:
        """Canonical text form; parsing it back gives an equal config."""
        out = []
        for s in sections or DEFAULTS:
            out.append(f"[{s}]")
            out.extend(f"{k} = {_format_value(self.values[s][k])}" for k in DEFAULTS[s])
            out.append("")
        return "\n".join(out)

    def digest(self, sections, extra="") -> str:
        text = self.dump(sections) + extra
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values


def parse_text(text: str, origin="<config>") -> RunConfig:
    pairs, section = [], None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in DEFAULTS:
                raise ConfigError(f"{origin}:{n}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key = value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        s, k = _split_key(key, None if "." in key else section)
        if s is None:
            raise ConfigError(f"{origin}:{n}: key {key!r} outside any section")
        pairs.append((f"{s}.{k}", raw))
    return RunConfig().with_overrides(pairs)


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``."""
    if path is None:
        cfg = RunConfig()
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg = parse_text(p.read_text(), str(p))
    return cfg.with_overrides(overrides)


def parse_overrides(items) -> list[tuple[str, str]]:
    """``["a.b=1", ...]`` into ``[("a.b", "1"), ...]``."""
    out = []
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        k, _, v = item.partition("=")
        out.append((k.strip(), v))
    return out
