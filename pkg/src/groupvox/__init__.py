"""Toy speech-text dialogue model with grouped audio-token prediction."""

from .vocab import JointVocabulary, ToyCodec, group, ungroup, toy_encode, toy_decode
from .model import GroupLM, ModelConfig, init_params, load_checkpoint, save_checkpoint
from .decoding import DecodeConfig, decode, stream_decode, first_packet_steps
from .session import DialogueSession
from .training import TrainConfig, compute_loss, train

__version__ = "0.1.0"

__all__ = [
    "JointVocabulary", "ToyCodec", "group", "ungroup", "toy_encode", "toy_decode",
    "GroupLM", "ModelConfig", "init_params", "load_checkpoint", "save_checkpoint",
    "DecodeConfig", "decode", "stream_decode", "first_packet_steps",
    "DialogueSession", "TrainConfig", "compute_loss", "train",
]
