"""Run configuration: a JSON document validated against ``schemas/run_config.json``.

Relative dataset paths resolve against the config file's directory.
"""
import json
import os
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import jsonschema

from prefact.errors import ConfigError
from prefact.factorize import FactorizationPlan
from prefact.train import TrainConfig

DEFAULT_OUTPUT = {"metrics_csv": "metrics.csv", "checkpoint": "model.puff", "summary": "summary.json"}


@lru_cache(maxsize=1)
def schema():
    text = resources.files("prefact").joinpath("schemas/run_config.json").read_text()
    return json.loads(text)


@dataclass
class RunConfig:
    arch_id: str
    train: TrainConfig
    dataset: dict
    plan: dict = None
    model_options: dict = field(default_factory=dict)
    output: dict = field(default_factory=lambda: dict(DEFAULT_OUTPUT))

    def build_plan(self):
        """The configured plan, or the architecture default when none is given.

        The plan is resolved against the vanilla model, so unknown layers or
        out-of-range ranks fail here rather than mid-run.
        """
        from prefact.zoo import DEFAULT_PLANS, build_model, default_plan

        if not self.plan:
            return default_plan(self.arch_id, **self.model_options)
        model = build_model(self.arch_id, **self.model_options)
        p = dict(self.plan)
        p.setdefault("arch_id", self.arch_id)
        if p["arch_id"] != self.arch_id:
            raise ConfigError(f"plan arch_id {p['arch_id']!r} differs from {self.arch_id!r}")
        if "K" not in p:
            k, exc = DEFAULT_PLANS[self.arch_id]
            p["K"] = k
            p.setdefault("exceptions", exc(model))
        plan = FactorizationPlan.from_json(p)
        plan.resolve(model)
        return plan


def parse_config(obj, base_dir="."):
    try:
        jsonschema.validate(obj, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    dataset = dict(obj["dataset"])
    for key in ("path", "labels_path"):
        if key in dataset and not os.path.isabs(dataset[key]):
            dataset[key] = os.path.normpath(os.path.join(base_dir, dataset[key]))
    try:
        train = TrainConfig(**obj["train"])
    except Exception as exc:
        raise ConfigError(f"invalid train section: {exc}") from None
    output = dict(DEFAULT_OUTPUT)
    output.update(obj.get("output", {}))
    return RunConfig(obj["arch_id"], train, dataset, obj.get("plan"),
                     dict(obj.get("model_options", {})), output)


def load_config(path):
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_config(obj, os.path.dirname(os.path.abspath(path)))
