"""RAT: chunked recurrence + inter-chunk attention language models, with baselines,
sequential decoding, a desk-scale training loop and a latency harness."""

from .attention import AttnMixer, attn_forward, causal_attention
from .cache import GenCache, cache_bytes, decode_step, prefill
from .model import LanguageModel, ModelConfig, count_params, load_checkpoint, model_forward, save_checkpoint
from .rat import RATMixer, merge_online_softmax, rat_forward_parallel, rat_project, rat_reference_naive
from .recurrence import RNNMixer, rnn_forward
from .rope import RopeSpec, rope_rotate
from .tensor import linear_scan, matmul, softmax_lse

__all__ = [
    "AttnMixer", "GenCache", "LanguageModel", "ModelConfig", "RATMixer", "RNNMixer", "RopeSpec",
    "attn_forward", "cache_bytes", "causal_attention", "count_params", "decode_step", "linear_scan",
    "load_checkpoint", "matmul", "merge_online_softmax", "model_forward", "prefill", "rat_forward_parallel",
    "rat_project", "rat_reference_naive", "rnn_forward", "rope_rotate", "save_checkpoint", "softmax_lse",
]
__version__ = "0.1.0"
