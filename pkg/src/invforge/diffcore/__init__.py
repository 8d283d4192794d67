"""Differentiable building blocks, optimizer, RNG and checkpoint I/O."""

from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check, module_grad_check, numeric_grad
from .nn import (MLP, Activation, Conv2d, CrossAttentionBlock, LayerNorm, Linear, Module,
                 MultiHeadAttention, ResBlock, Sequential, TransformerBlock, Upsample2x,
                 attention_apply, mlp_apply, no_param_grads, param_grads_enabled, softmax,
                 timestep_embedding)
from .optim import AdamW, OptimizerState, adamw_step, cosine_lr
from .rng import make_rng, split

__all__ = [
    "MLP", "Activation", "AdamW", "Conv2d", "CrossAttentionBlock", "LayerNorm", "Linear", "Module",
    "MultiHeadAttention", "OptimizerState", "ResBlock", "Sequential", "TransformerBlock", "Upsample2x",
    "adamw_step", "attention_apply", "cosine_lr", "grad_check", "load_checkpoint", "make_rng",
    "mlp_apply", "module_grad_check", "no_param_grads", "numeric_grad", "param_grads_enabled", "save_checkpoint", "softmax", "split",
    "timestep_embedding",
]
