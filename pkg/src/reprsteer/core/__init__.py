from .io import load_model, load_transform, save_model, save_transform
from .lm import (
    KVCache,
    LMConfig,
    ModelBundle,
    causal_lm_loss,
    decode_step,
    forward_hidden,
    init_model,
    lm_head_logits,
    log_softmax,
    next_token_logprobs,
    params_checksum,
    prefill,
)
from .transform import (
    CompiledCombination,
    MultiAttributeWeights,
    TransformBlock,
    TransformBlockConfig,
    apply_transform,
    combine_transforms,
    init_transform,
    transform_backward,
    transform_forward,
)
