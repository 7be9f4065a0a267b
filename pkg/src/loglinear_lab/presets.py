"""Named run and model configurations used by the CLI and the acceptance suite."""

from __future__ import annotations

from .model import ModelConfig
from .tasks import MqarConfig, SelectiveCopyConfig
from .train import OptimConfig, RunConfig


def _task_model(vocab: int, t_max: int, **kw) -> ModelConfig:
    return ModelConfig(vocab_size=vocab, d_model=64, n_layers=2, n_heads=2, d_head=32, t_max=t_max, **kw)


RUN_PRESETS: dict[str, RunConfig] = {
    # smoke-test scale, seconds
    "tiny": RunConfig(
        task=MqarConfig(seq_len=8, num_pairs=2, vocab_size=16),
        model=ModelConfig(vocab_size=16, d_model=8, n_layers=2, n_heads=2, d_head=4, t_max=8, d_h=8),
        steps=2, batch_size=2, eval_every=1, eval_batches=1, eval_batch_size=4,
    ),
    # desk-scale recall runs
    "mqar-small": RunConfig(
        task=MqarConfig(seq_len=32, num_pairs=2), model=_task_model(128, 32, short_conv=4),
        steps=500, eval_every=100, eval_batches=4,
    ),
    "mqar-desk": RunConfig(
        task=MqarConfig(seq_len=64, num_pairs=8), model=_task_model(128, 128, short_conv=4),
        steps=2000, eval_every=250, eval_batches=4, seeds=(0, 1, 2),
    ),
    # full-size settings as described for the recall and copying experiments
    "mqar": RunConfig(
        task=MqarConfig(seq_len=128, num_pairs=8), model=_task_model(128, 256, short_conv=4),
        steps=5000, eval_every=500, seeds=(0, 1, 2, 3, 4),
    ),
    "selcopy": RunConfig(
        task=SelectiveCopyConfig(seq_len=256), model=_task_model(64, 256, short_conv=4),
        steps=30000, eval_every=1000, seeds=(0, 1, 2, 3, 4),
    ),
}

MODEL_PRESETS: dict[str, ModelConfig] = {
    "tiny": RUN_PRESETS["tiny"].model,
    # language-model shapes, used for the parameter audit only
    "lm512": ModelConfig(vocab_size=50257, d_model=512, n_layers=6, n_heads=4, d_head=128, t_max=512, d_h=20),
    "lm256": ModelConfig(vocab_size=50257, d_model=256, n_layers=6, n_heads=4, d_head=64, t_max=512, d_h=20),
}

LM_OPTIM = OptimConfig(algorithm="adamw", lr=3e-4, weight_decay=0.1, warmup_steps=500, schedule="cosine")
