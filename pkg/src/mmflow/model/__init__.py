from mmflow.model.config import ModelConfig, tiny_config, toy_config
from mmflow.model.dit import MOD_CHUNKS, UnifiedDiT, init_params
from mmflow.model.layers import patch_positions, rope3d, rope_tables, timestep_sinusoid, tokenize

__all__ = [
    "MOD_CHUNKS", "ModelConfig", "UnifiedDiT", "init_params", "patch_positions", "rope3d",
    "rope_tables", "timestep_sinusoid", "tiny_config", "tokenize", "toy_config",
]
