import math
from typing import Dict, Mapping

from . import functional as F
from .errors import DimensionError
from .tensor import Tensor

__all__ = ["LN_EPS", "scope", "mlp_block", "multi_head_attention", "attention_block"]

LN_EPS = 1e-6

Params = Mapping[str, Tensor]


def scope(params: Params, prefix: str) -> Dict[str, Tensor]:
    """Entries under ``prefix`` with the prefix stripped."""
    return {name[len(prefix):]: value for name, value in params.items() if name.startswith(prefix)}


def mlp_block(x: Tensor, p: Params) -> Tensor:
    """GELU(x W_in + b_in) W_out + b_out."""
    if x.shape[-1] != p["W_in"].shape[0] or p["W_in"].shape[1] != p["W_out"].shape[0]:
        raise DimensionError(f"MLP weights {p['W_in'].shape}/{p['W_out'].shape} do not fit input {x.shape}")
    hidden = F.gelu(F.add(F.matmul(x, p["W_in"]), p["b_in"]))
    return F.add(F.matmul(hidden, p["W_out"]), p["b_out"])


def multi_head_attention(x: Tensor, p: Params, num_heads: int) -> Tensor:
    batch, length, width = x.shape
    if width % num_heads:
        raise DimensionError(f"width {width} not divisible by {num_heads} heads")
    d_head = width // num_heads

    def heads(name: str) -> Tensor:
        projected = F.add(F.matmul(x, p[f"W_{name}"]), p[f"b_{name}"])
        return F.transpose(F.reshape(projected, (batch, length, num_heads, d_head)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = F.mul(F.matmul(q, F.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d_head))
    context = F.matmul(F.softmax(scores), v)
    merged = F.reshape(F.transpose(context, (0, 2, 1, 3)), (batch, length, width))
    return F.add(F.matmul(merged, p["W_o"]), p["b_o"])


def attention_block(x: Tensor, p: Params, num_heads: int) -> Tensor:
    """Pre-norm residual self-attention: x + MHA(LN(x)).

    ``p`` holds ``ln1/gain``, ``ln1/bias`` and ``attn/W_{q,k,v,o}``,
    ``attn/b_{q,k,v,o}``. A rank-2 input is treated as one sequence.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = F.reshape(x, (1,) + x.shape)
    normed = F.layer_norm(x, p["ln1/gain"], p["ln1/bias"], LN_EPS)
    out = F.add(x, multi_head_attention(normed, scope(p, "attn/"), num_heads))
    return F.reshape(out, out.shape[1:]) if squeeze else out
