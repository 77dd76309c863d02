"""Materialize small pre-trained-format encoder checkpoints.

Extraction normally points at full BEiT/BERT-class checkpoints. Offline
environments (and the test suite) have no model hub, so this module writes
randomly initialized models of the same on-disk layout; everything
downstream loads them with the stock ``from_pretrained`` machinery and
cannot tell the difference. Weights are seeded, so two calls with the same
arguments produce identical models.
"""

import os

import torch
from transformers import (BeitConfig, BeitImageProcessor, BeitModel,
                          BertConfig, BertModel, BertTokenizer)

from .errors import ConfigError

# character-level wordpieces: any lowercase alphanumeric word decomposes
# into one piece per character, so token counts are predictable in tests
_SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
_CHARS = [chr(c) for c in range(ord("a"), ord("z") + 1)] + list("0123456789")
VOCAB = _SPECIALS + _CHARS + ["##" + ch for ch in _CHARS]


def make_visual_model(out_dir, image_size=32, patch_size=16, hidden_size=32,
                      layers=1, heads=2, seed=0):
    """Write a BEiT-class model plus its image processor config."""
    if image_size % patch_size != 0:
        raise ConfigError(
            f"image size {image_size} is not a multiple of patch size {patch_size}")
    torch.manual_seed(seed)
    config = BeitConfig(
        image_size=image_size,
        patch_size=patch_size,
        hidden_size=hidden_size,
        num_hidden_layers=layers,
        num_attention_heads=heads,
        intermediate_size=2 * hidden_size,
    )
    os.makedirs(out_dir, exist_ok=True)
    BeitModel(config).save_pretrained(out_dir)
    BeitImageProcessor(
        size={"height": image_size, "width": image_size},
        do_center_crop=False,
    ).save_pretrained(out_dir)
    return out_dir


def make_textual_model(out_dir, hidden_size=32, layers=1, heads=2,
                       max_positions=64, seed=0):
    """Write a BERT-class model plus its wordpiece tokenizer."""
    torch.manual_seed(seed)
    os.makedirs(out_dir, exist_ok=True)
    tokenizer = BertTokenizer(
        vocab={token: i for i, token in enumerate(VOCAB)},
        do_lower_case=True,
        model_max_length=max_positions,
    )
    tokenizer.save_pretrained(out_dir)
    config = BertConfig(
        vocab_size=len(VOCAB),
        hidden_size=hidden_size,
        num_hidden_layers=layers,
        num_attention_heads=heads,
        intermediate_size=2 * hidden_size,
        max_position_embeddings=max_positions,
    )
    BertModel(config).save_pretrained(out_dir)
    return out_dir
