from moedllm.model.base import ForwardRequest, ForwardResult, Model, RequestError, RoutingPolicy
from moedllm.model.cache import CacheInconsistencyError, LayerKVCache
from moedllm.model.config import ConfigError, ModelConfig
from moedllm.model.io import load_model, save_model
from moedllm.model.routing import RoutingRecord, route, route_logits
from moedllm.model.scripted import (
    ScriptEntry,
    ScriptSpec,
    ScriptUnderrunError,
    ScriptedModel,
    build_scripted_model,
    left_to_right_script,
)
from moedllm.model.toy import MoELayerWeights, ToyMoEModel, build_toy_model


def forward(model: Model, ctx: LayerKVCache, req: ForwardRequest) -> ForwardResult:
    return model.forward(ctx, req)


__all__ = [
    "CacheInconsistencyError", "ConfigError", "ForwardRequest", "ForwardResult", "LayerKVCache",
    "Model", "ModelConfig", "MoELayerWeights", "RequestError", "RoutingPolicy", "RoutingRecord",
    "ScriptEntry", "ScriptSpec", "ScriptUnderrunError", "ScriptedModel", "ToyMoEModel",
    "build_scripted_model", "build_toy_model", "forward", "left_to_right_script", "load_model",
    "route", "route_logits", "save_model",
]
