from ._core import (
    ConfigError,
    Cube,
    DegenerateSceneError,
    DimensionError,
    Error,
    FormatError,
    GradGroup,
    IoError,
    Model,
    ModelConfig,
    NumericDomainError,
    SpecError,
    TrainConfig,
    VcaResult,
    evaluate,
    generate_synthetic,
    gradcheck,
    graph_adjacency,
    read_pgm,
    spectral_angle,
    train,
    vca,
    write_pgm,
)


def config_for(cube, **overrides):
    """TrainConfig sized for `cube`; keyword overrides go to the training or model config."""
    cfg = TrainConfig()
    cfg.model.bands = cube.bands
    cfg.model.endmembers = cube.endmember_count
    for key, value in overrides.items():
        target = cfg if hasattr(cfg, key) and key != "model" else cfg.model
        if not hasattr(target, key):
            raise ConfigError(f"unknown option {key}")
        setattr(target, key, value)
    return cfg
