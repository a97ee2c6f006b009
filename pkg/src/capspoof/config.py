"""Flat dotted-key run configuration (YAML syntax), e.g.::

    lm.seed: 7
    scheme.name: KGW
    scheme.delta: 3.0
    grpo.lr: 700
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from capspoof.policy import GRPOConfig
from capspoof.toylm import ToyLM
from capspoof.watermark import DEFAULTS, WatermarkScheme, make_scheme

# lr for the tabular toy benchmark; per-token averaging spreads each update
# over ~V^2 table entries, so LLM-scale step sizes barely move the table.
TOY_LR = 700.0


class ConfigError(ValueError):
    pass


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass
class RunConfig:
    lm: ToyLM = field(default_factory=ToyLM)
    scheme: WatermarkScheme = field(default_factory=lambda: make_scheme("KGW"))
    grpo: GRPOConfig = field(default_factory=lambda: GRPOConfig(lr=TOY_LR))
    policy_order: int = 1
    train_size: int = 100
    eval_size: int = 400
    length: int = 200
    seed: int = 42
    seeds: tuple[int, ...] = (42, 1234)
    out: str = "runs/default"

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        flat = _flatten(flat)
        lm_cfg, scheme_cfg, grpo_cfg = {}, {}, {}
        top = {}
        scheme_name = "KGW"
        for key, val in flat.items():
            head, _, rest = key.partition(".")
            if head == "lm" and rest:
                lm_cfg[rest] = val
            elif head == "scheme" and rest:
                if rest in ("name", "algorithm_name"):
                    scheme_name = val
                else:
                    scheme_cfg[rest] = val
            elif head == "grpo" and rest:
                grpo_cfg[rest] = val
            elif key in ("policy.order", "data.train_size", "data.eval_size", "data.length", "seed", "seeds", "out"):
                top[key] = val
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            lm = ToyLM.from_config(lm_cfg)
            if scheme_name not in DEFAULTS:
                raise ConfigError(f"unknown scheme {scheme_name!r}")
            scheme = make_scheme(scheme_name, **scheme_cfg)
            grpo_cfg.setdefault("lr", TOY_LR)
            grpo = GRPOConfig.from_config(grpo_cfg)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls(lm=lm, scheme=scheme, grpo=grpo)
        cfg.policy_order = int(top.get("policy.order", cfg.policy_order))
        cfg.train_size = int(top.get("data.train_size", cfg.train_size))
        cfg.eval_size = int(top.get("data.eval_size", cfg.eval_size))
        cfg.length = int(top.get("data.length", cfg.length))
        cfg.seed = int(top.get("seed", cfg.seed))
        if "seeds" in top:
            seeds = top["seeds"]
            cfg.seeds = tuple(int(s) for s in (seeds if isinstance(seeds, (list, tuple)) else str(seeds).split(",")))
        cfg.out = str(top.get("out", cfg.out))
        if "grpo.seed" not in flat:
            cfg.grpo = dataclasses.replace(cfg.grpo, seed=cfg.seed)
        return cfg

    def to_flat(self) -> dict:
        flat = {f"lm.{k}": v for k, v in self.lm.to_config().items()}
        scheme = self.scheme.to_config()
        flat["scheme.name"] = scheme.pop("algorithm_name")
        flat.update({f"scheme.{k}": v for k, v in scheme.items()})
        flat.update({f"grpo.{k}": v for k, v in self.grpo.to_config().items()})
        flat.update({"policy.order": self.policy_order, "data.train_size": self.train_size,
                     "data.eval_size": self.eval_size, "data.length": self.length,
                     "seed": self.seed, "seeds": list(self.seeds), "out": self.out})
        return flat

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed, grpo=dataclasses.replace(self.grpo, seed=seed))

    def write(self, path) -> None:
        Path(path).write_text(dump_flat(self.to_flat()))


def dump_flat(flat: dict) -> str:
    return yaml.safe_dump(flat, sort_keys=True, default_flow_style=None)


def load_flat(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping of dotted keys")
    return data


def load_run_config(path=None, **overrides) -> RunConfig:
    flat = load_flat(path) if path else {}
    flat = _flatten(flat)
    flat.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_flat(flat)
