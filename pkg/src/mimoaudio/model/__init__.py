from .config import (AUDIO_BEGIN, AUDIO_END, EOS, PATCH, TEXT_VOCAB, ModelConfig, RunConfig, StageWeights,
                     TrainConfig, dump_config, load_config)
from .corpus import audio_token_accuracy, synthetic_corpus, with_control_tokens
from .generate import GenerationSettings, generate, prompt_of
from .lm import Batch, ContextExceeded, LossParts, MimoToyLM, build_model, count_params, delay_tensor
from .train import TrainingError, TrainState, make_optimizer, train, train_step

__all__ = [
    "AUDIO_BEGIN", "AUDIO_END", "Batch", "ContextExceeded", "EOS", "GenerationSettings", "LossParts",
    "MimoToyLM", "ModelConfig", "PATCH", "RunConfig", "StageWeights", "TEXT_VOCAB", "TrainConfig",
    "TrainState", "TrainingError", "audio_token_accuracy", "build_model", "count_params", "delay_tensor",
    "dump_config", "generate", "load_config", "make_optimizer", "prompt_of", "synthetic_corpus", "train",
    "train_step", "with_control_tokens",
]
