"""Run pre-trained encoders over manifest entries and write token banks.

Per entity the stored vectors are the encoder's last hidden state at token
granularity: one vector per image patch (visual) or per subword (textual),
truncated to ``max_tokens``. Leading [CLS] and other special positions are
dropped; the engine pools sequences itself.

Entities whose input is unusable (unreadable image, empty description) are
skipped and listed in the report; the engine substitutes its placeholder
token for entities absent from a bank, so a partial bank is still valid.
"""

import dataclasses
import os

import numpy as np
import torch
from PIL import Image
from transformers import AutoImageProcessor, AutoModel, AutoTokenizer

from . import mmtk
from .errors import ConfigError, ModelDirError


@dataclasses.dataclass
class Report:
    modality: str
    out_path: str
    dim: int
    written: list
    skipped: list  # (entity_id, reason) pairs

    def lines(self):
        head = (f"{self.modality} bank {self.out_path}: "
                f"{len(self.written)} entities, dim {self.dim}, "
                f"{len(self.skipped)} skipped")
        return [head] + [f"skipped {eid}: {why}" for eid, why in self.skipped]


def _check_model_dir(model_dir):
    if not os.path.isdir(model_dir):
        raise ModelDirError(f"model directory not found: {model_dir}")
    if not os.path.isfile(os.path.join(model_dir, "config.json")):
        raise ModelDirError(f"not a saved model directory: {model_dir}")


def _prepare(model_dir, max_tokens):
    if max_tokens < 1:
        raise ConfigError(f"max_tokens must be positive, got {max_tokens}")
    _check_model_dir(model_dir)
    # single-threaded inference keeps summation order fixed, so a rerun
    # over the same inputs is byte-identical
    torch.set_num_threads(1)
    model = AutoModel.from_pretrained(model_dir).eval()
    return model


def extract_visual(entries, model_dir, out_path, max_tokens=16):
    model = _prepare(model_dir, max_tokens)
    processor = AutoImageProcessor.from_pretrained(model_dir)
    dim = model.config.hidden_size
    sequences = {}
    skipped = []
    for entry in entries:
        try:
            with Image.open(entry.payload) as img:
                rgb = img.convert("RGB")
        except (OSError, ValueError) as exc:
            skipped.append((entry.entity_id, f"unreadable image: {exc}"))
            continue
        pixels = processor(images=rgb, return_tensors="pt")
        with torch.no_grad():
            hidden = model(**pixels).last_hidden_state[0]
        # position 0 is [CLS]; the rest are patch vectors
        tokens = hidden[1:1 + max_tokens]
        sequences[entry.entity_id] = np.ascontiguousarray(tokens.numpy(), dtype="<f4")
    mmtk.write_bank(out_path, "visual", dim, sequences)
    return Report("visual", out_path, dim, sorted(sequences), skipped)


def extract_textual(entries, model_dir, out_path, max_tokens=16):
    model = _prepare(model_dir, max_tokens)
    tokenizer = AutoTokenizer.from_pretrained(model_dir)
    dim = model.config.hidden_size
    # +2 leaves room for [CLS]/[SEP]; clamp so positions never overflow
    max_length = min(max_tokens + 2, model.config.max_position_embeddings)
    sequences = {}
    skipped = []
    for entry in entries:
        if not entry.payload.strip():
            skipped.append((entry.entity_id, "empty description"))
            continue
        encoded = tokenizer(entry.payload, return_tensors="pt",
                            truncation=True, max_length=max_length,
                            return_special_tokens_mask=True)
        special = encoded.pop("special_tokens_mask")[0]
        with torch.no_grad():
            hidden = model(**encoded).last_hidden_state[0]
        tokens = hidden[special == 0][:max_tokens]
        if tokens.shape[0] == 0:
            skipped.append((entry.entity_id, "no subword tokens"))
            continue
        sequences[entry.entity_id] = np.ascontiguousarray(tokens.numpy(), dtype="<f4")
    mmtk.write_bank(out_path, "textual", dim, sequences)
    return Report("textual", out_path, dim, sorted(sequences), skipped)
