"""Flat ``key = value`` run configuration with typed defaults and canonical emission."""

from __future__ import annotations

from dataclasses import dataclass

from .adversary import DiscriminatorConfig
from .phantom import PhantomParams
from .pipeline import TrainConfig
from .swinseer import GeneratorConfig
from .texture import FeatureStack


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(t) for t in text.split(","))


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(","))


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"{text!r} not one of {', '.join(options)}")
        return text

    return parse


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default, help)
SCHEMA: dict[str, tuple] = {
    "run.seed": (int, 0, "master seed; module seeds derive from it by fixed offsets"),
    "phantom.n": (int, 40, "number of phantom pairs"),
    "phantom.grid": (int, 32, "volume edge in voxels"),
    "phantom.train_fraction": (float, 0.8, "fraction of pairs in the training split"),
    "phantom.noise_sigma": (float, 5.0, "additive noise sigma (HU)"),
    "phantom.tlc_mean": (float, -880.0, "parenchyma mean at inspiration (HU)"),
    "phantom.tlc_sigma": (float, 20.0, "parenchyma texture sigma (HU)"),
    "phantom.delta_hu": (float, 120.0, "expiratory densification of healthy tissue (HU)"),
    "phantom.pocket_count": (_ints, (1, 4), "min,max trapped pockets per pair"),
    "phantom.pocket_radius": (_floats, (2.5, 4.0), "min,max pocket radius (voxels)"),
    "phantom.pocket_tlc_shift": (float, -40.0, "inspiratory offset inside pockets (HU)"),
    "phantom.vessel_count": (int, 4, "vessels per pair"),
    "gen.arch": (_choice("swinseer", "identity"), "swinseer", "generator architecture"),
    "gen.patch": (int, 16, "patch edge p"),
    "gen.features": (int, 16, "base feature width f"),
    "gen.window": (int, 2, "attention window W"),
    "gen.depths": (_ints, (2, 2), "blocks per encoder stage"),
    "gen.heads": (_ints, (), "heads per stage (empty = automatic)"),
    "gen.se_reduction": (int, 2, "SE reduction factor r"),
    "gen.mlp_ratio": (int, 4, "MLP hidden width ratio"),
    "gen.head_bias": (float, -1.0, "initial bias of the output heads (normalized air)"),
    "disc.widths": (_ints, (16, 32), "discriminator layer widths"),
    "disc.patch_edge": (int, 4, "receptive patch edge"),
    "disc.norm": (_choice("instance", "batch", "none"), "instance", "discriminator normalization"),
    "texture.widths": (_ints, (8, 16, 32), "frozen embedder stage widths"),
    "texture.kernel": (int, 3, "frozen embedder kernel size"),
    "train.lambda1": (float, 100.0, "weight of the multiresolution L1 term"),
    "train.lambda2": (float, 100.0, "weight of the multiview DISTS term"),
    "train.lr_g": (float, 2e-4, "generator learning rate"),
    "train.lr_d": (float, 5e-5, "discriminator learning rate"),
    "train.beta1": (float, 0.9, "Adam beta1"),
    "train.beta2": (float, 0.999, "Adam beta2"),
    "train.eps": (float, 1e-8, "Adam epsilon"),
    "train.batch": (int, 4, "batch size"),
    "train.steps": (int, 3000, "steps per cascade stage"),
    "train.overlap": (int, 4, "patch overlap o"),
    "train.cascade": (int, 2, "cascade length n"),
    "train.log_wall_time": (_bool, False, "record per-step wall time (breaks byte-identical logs)"),
    "synth.batch": (int, 8, "patches per generator call at inference"),
    "eval.ssim_window": (int, 7, "SSIM window edge"),
}

SEED_OFFSETS = {"phantom": 0, "gen": 11, "disc": 23, "texture": 2, "train": 37}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def with_seed(self, seed: int) -> RunConfig:
        return RunConfig({**self.values, "run.seed": int(seed)})

    def seed(self, module: str) -> int:
        return self.values["run.seed"] + SEED_OFFSETS[module]

    def emit(self) -> str:
        return emit_config(self)

    def phantom_params(self) -> PhantomParams:
        v = self.values
        return PhantomParams(
            grid=v["phantom.grid"],
            noise_sigma=v["phantom.noise_sigma"],
            tlc_mean=v["phantom.tlc_mean"],
            tlc_sigma=v["phantom.tlc_sigma"],
            delta_hu=v["phantom.delta_hu"],
            pocket_count=v["phantom.pocket_count"],
            pocket_radius=v["phantom.pocket_radius"],
            pocket_tlc_shift=v["phantom.pocket_tlc_shift"],
            vessel_count=v["phantom.vessel_count"],
        )

    def generator(self) -> GeneratorConfig:
        v = self.values
        return GeneratorConfig(
            patch_size=v["gen.patch"],
            base_features=v["gen.features"],
            window_size=v["gen.window"],
            stage_depths=v["gen.depths"],
            heads_per_stage=v["gen.heads"] or None,
            se_reduction=v["gen.se_reduction"],
            mlp_ratio=v["gen.mlp_ratio"],
            head_bias=v["gen.head_bias"],
            seed=self.seed("gen"),
            arch=v["gen.arch"],
        )

    def discriminator(self) -> DiscriminatorConfig:
        v = self.values
        return DiscriminatorConfig(widths=v["disc.widths"], patch_edge=v["disc.patch_edge"],
                                   norm=v["disc.norm"], seed=self.seed("disc"))

    def texture_stack(self) -> FeatureStack:
        return FeatureStack(self.values["texture.widths"], self.values["texture.kernel"], self.seed("texture"))

    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            lambda1=v["train.lambda1"],
            lambda2=v["train.lambda2"],
            lr_g=v["train.lr_g"],
            lr_d=v["train.lr_d"],
            beta1=v["train.beta1"],
            beta2=v["train.beta2"],
            eps=v["train.eps"],
            batch_size=v["train.batch"],
            steps=v["train.steps"],
            seed=self.seed("train"),
            patch=v["gen.patch"],
            overlap=v["train.overlap"],
            cascade=v["train.cascade"],
            log_wall_time=v["train.log_wall_time"],
        )


def defaults() -> RunConfig:
    return RunConfig({k: spec[1] for k, spec in SCHEMA.items()})


def parse_config(text: str) -> RunConfig:
    values = dict(defaults().values)
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(value)
        except ValueError as err:
            raise ConfigError(f"line {lineno}: bad value for {key}: {err}") from None
    return RunConfig(values)


def emit_config(config: RunConfig) -> str:
    return "".join(f"{k} = {_fmt(config.values[k])}\n" for k in sorted(config.values))


def load_config(path) -> RunConfig:
    if path is None:
        return defaults()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
