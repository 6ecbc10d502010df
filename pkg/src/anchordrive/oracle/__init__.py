from .scenarios import (SCENARIO_KINDS, INSTRUCTION_NAMES, CONTINUE, FRAME_DT,
                        HORIZON, Obstacle, SceneState, Scenario, ScenarioError,
                        build_scenario, generate_scenario, save_scenes,
                        load_scenes)
from .encoder import (OracleWeights, make_oracle_weights, encode_context,
                      featurize_scene, R_MAX, FEATURE_DIM,
                      DEFAULT_ORACLE_SEED)

__all__ = [
    "SCENARIO_KINDS", "INSTRUCTION_NAMES", "CONTINUE", "FRAME_DT", "HORIZON",
    "Obstacle", "SceneState", "Scenario", "ScenarioError", "build_scenario",
    "generate_scenario", "save_scenes", "load_scenes",
    "OracleWeights", "make_oracle_weights", "encode_context",
    "featurize_scene", "R_MAX", "FEATURE_DIM", "DEFAULT_ORACLE_SEED",
]
