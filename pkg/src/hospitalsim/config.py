"""Run configuration: one YAML file per run, flags override file values.

Secrets never live in the file (the API key is read from the environment
variable the config names); every command echoes the fully resolved config
into its output directory before acting, with nothing to redact beyond the
env var name itself.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .doctor import DoctorConfig
from .errors import ConfigError
from .knowledge import default_knowledge_path
from .llm import BackendConfig, MockBackend, OpenAIBackend, load_mock_rules
from .templates import TemplateSet, default_template_dir
from .world import WorldConfig


@dataclass
class RunConfig:
    seed: int
    knowledge: str = str(default_knowledge_path())
    templates_dir: str = str(default_template_dir())
    output_dir: str = "runs/out"
    backend_kind: str = "mock"  # mock | real
    backend: BackendConfig = field(default_factory=BackendConfig)
    mock_script: str | None = None
    mock_embed_dim: int = 16
    world: WorldConfig = field(default_factory=WorldConfig)
    doctor: DoctorConfig = field(default_factory=DoctorConfig)

    def validate(self):
        if not Path(self.knowledge).exists():
            raise ConfigError(f"knowledge path {self.knowledge!r} does not exist")
        if not Path(self.templates_dir).is_dir():
            raise ConfigError(f"templates_dir {self.templates_dir!r} is not a directory")
        if self.backend_kind not in ("mock", "real"):
            raise ConfigError(f"backend kind must be mock or real, got {self.backend_kind!r}")
        if self.mock_script is not None and not Path(self.mock_script).exists():
            raise ConfigError(f"mock_script {self.mock_script!r} does not exist")

    def build_backend(self):
        if self.backend_kind == "real":
            return OpenAIBackend(self.backend)
        rules = load_mock_rules(self.mock_script) if self.mock_script else []
        return MockBackend(rules, embed_dim=self.mock_embed_dim, embed_seed=self.seed)

    def build_templates(self) -> TemplateSet:
        return TemplateSet(self.templates_dir)

    def to_dict(self) -> dict:
        return asdict(self)

    def echo(self, output_dir: str | Path) -> Path:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        target = out / "resolved_config.yaml"
        target.write_text(
            yaml.safe_dump(self.to_dict(), sort_keys=True), encoding="utf-8"
        )
        return target


def _take(data: dict, cls, current):
    kwargs = {}
    for key, value in (data or {}).items():
        if not hasattr(current, key):
            raise ConfigError(f"unknown {cls.__name__} field {key!r}")
        kwargs[key] = value
    merged = asdict(current)
    merged.update(kwargs)
    return cls(**merged)


def load_run_config(path: str | Path | None, **overrides) -> RunConfig:
    """Build a RunConfig from an optional YAML file plus keyword overrides
    (CLI flags win over file values)."""
    data: dict = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
        data = raw
    data.update({k: v for k, v in overrides.items() if v is not None})
    if "seed" not in data:
        raise ConfigError("seed is mandatory (set it in the config file or via --seed)")

    config = RunConfig(seed=int(data["seed"]))
    for key in ("knowledge", "templates_dir", "output_dir", "backend_kind",
                "mock_script", "mock_embed_dim"):
        if key in data and data[key] is not None:
            setattr(config, key, data[key])
    config.backend = _take(data.get("backend", {}), BackendConfig, config.backend)
    config.world = _take(data.get("world", {}), WorldConfig, config.world)
    config.doctor = _take(data.get("doctor", {}), DoctorConfig, config.doctor)
    if config.world.seed == 0:
        config.world.seed = config.seed
    config.validate()
    return config
