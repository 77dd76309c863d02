"""Knowledge-graph datasets: triple files, MMTK token banks, synthetic graphs.

A dataset directory holds entity2id / relation2id vocabularies plus
train/valid/test triple files (see the format notes at the bottom of this
module). Token banks are standalone binary files mapping entity ids to
sequences of float32 token vectors, one file per modality.
"""

from __future__ import annotations

import dataclasses
import os
import struct

import numpy as np

from .errors import (
    BadMagicError,
    BankFormatError,
    ConfigError,
    DataError,
    ModalityMismatchError,
    ParseError,
    TruncatedBankError,
    VersionMismatchError,
)

MODALITY_CODES = {"visual": 1, "textual": 2}
_CODE_NAMES = {v: k for k, v in MODALITY_CODES.items()}

BANK_MAGIC = b"MMTK"
BANK_VERSION = 1
_BANK_HEADER = struct.Struct("<4sHBBIQ")  # magic, version, modality, reserved, dim, count
_ENTITY_HEADER = struct.Struct("<QI")  # entity_id, token_count


@dataclasses.dataclass
class TripleStore:
    """Immutable triple splits plus the filtered-ranking answer index.

    Head-prediction queries reuse the tail machinery through inverse
    relations: relation r + relation_count means "r read backwards", so
    filter_index also answers (tail, r_inv) -> heads.
    """

    entity_count: int
    relation_count: int
    train: list
    valid: list
    test: list
    filter_index: dict

    def split(self, name):
        try:
            return {"train": self.train, "valid": self.valid, "test": self.test}[name]
        except KeyError:
            raise ConfigError(f"unknown split '{name}'") from None

    @property
    def query_relation_count(self):
        return 2 * self.relation_count


@dataclasses.dataclass
class TokenBank:
    modality: str  # "visual" or "textual"
    dim: int
    sequences: dict  # entity_id -> float32 array (token_count, dim)

    def validate_against(self, entity_count):
        for eid in self.sequences:
            if not 0 <= eid < entity_count:
                raise DataError(
                    f"{self.modality} bank references entity {eid} "
                    f"outside [0, {entity_count})")


@dataclasses.dataclass
class SynthConfig:
    entity_count: int = 50
    relation_count: int = 5
    triple_count: int = 200
    tokens_per_modality: int = 4
    token_dim: int = 16
    seed: int = 0

    def validate(self):
        for field in ("entity_count", "relation_count", "triple_count",
                      "tokens_per_modality", "token_dim"):
            if getattr(self, field) <= 0:
                raise ConfigError(f"synth: {field} must be positive")
        cap = self.entity_count ** 2 * self.relation_count
        if self.triple_count > cap:
            raise ConfigError(
                f"synth: triple_count {self.triple_count} exceeds the "
                f"{cap} distinct triples possible")


def build_filter_index(relation_count, *splits):
    index = {}
    for triples in splits:
        for h, r, t in triples:
            index.setdefault((h, r), set()).add(t)
            index.setdefault((t, r + relation_count), set()).add(h)
    return index


# ---------------------------------------------------------------------------
# text file loading


def _resolve(dir_path, stem):
    for name in (stem, stem + ".txt"):
        p = os.path.join(dir_path, name)
        if os.path.isfile(p):
            return p
    raise DataError(f"missing dataset file '{stem}' in {dir_path}")


def _load_vocab(path):
    """Parse name<TAB>id lines; ids must be exactly 0..N-1 with no repeats."""
    by_id = {}
    names = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'name<TAB>id', got {line!r}")
            name, id_text = parts
            try:
                ident = int(id_text)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: id {id_text!r} is not an integer") from None
            if name in names:
                raise ParseError(f"{path}:{lineno}: duplicate vocabulary name {name!r}")
            if ident in by_id:
                raise ParseError(f"{path}:{lineno}: duplicate vocabulary id {ident}")
            names.add(name)
            by_id[ident] = name
    if not by_id:
        raise ParseError(f"{path}: empty vocabulary")
    count = len(by_id)
    missing = [i for i in range(count) if i not in by_id]
    if missing:
        raise ParseError(f"{path}: ids not dense in [0, {count}), first gap at {missing[0]}")
    return count


def _load_split(path, entity_count, relation_count):
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 'h<TAB>r<TAB>t', got {line!r}")
            try:
                h, r, t = (int(p) for p in parts)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-integer id in {line!r}") from None
            if not (0 <= h < entity_count and 0 <= t < entity_count):
                raise ParseError(f"{path}:{lineno}: dangling entity id in {line!r}")
            if not 0 <= r < relation_count:
                raise ParseError(f"{path}:{lineno}: dangling relation id {r}")
            triples.append((h, r, t))
    if not triples:
        raise ParseError(f"{path}: empty split")
    return triples


def load_triples(dir_path):
    entity_count = _load_vocab(_resolve(dir_path, "entity2id"))
    relation_count = _load_vocab(_resolve(dir_path, "relation2id"))
    splits = {}
    for stem in ("train", "valid", "test"):
        splits[stem] = _load_split(_resolve(dir_path, stem), entity_count, relation_count)

    seen = {}
    for stem, triples in splits.items():
        for tr in set(triples):
            if tr in seen:
                raise DataError(f"triple {tr} appears in both {seen[tr]} and {stem}")
            seen[tr] = stem

    return TripleStore(
        entity_count=entity_count,
        relation_count=relation_count,
        train=splits["train"],
        valid=splits["valid"],
        test=splits["test"],
        filter_index=build_filter_index(relation_count, *splits.values()),
    )


def write_triples(store, dir_path, entity_names=None, relation_names=None):
    """Write the five text files; inverse of load_triples for valid stores."""
    os.makedirs(dir_path, exist_ok=True)
    ent = entity_names or [f"ent_{i}" for i in range(store.entity_count)]
    rel = relation_names or [f"rel_{i}" for i in range(store.relation_count)]
    with open(os.path.join(dir_path, "entity2id.txt"), "w", encoding="utf-8") as fh:
        for i, name in enumerate(ent):
            fh.write(f"{name}\t{i}\n")
    with open(os.path.join(dir_path, "relation2id.txt"), "w", encoding="utf-8") as fh:
        for i, name in enumerate(rel):
            fh.write(f"{name}\t{i}\n")
    for stem in ("train", "valid", "test"):
        with open(os.path.join(dir_path, stem + ".txt"), "w", encoding="utf-8") as fh:
            for h, r, t in getattr(store, stem):
                fh.write(f"{h}\t{r}\t{t}\n")


# ---------------------------------------------------------------------------
# MMTK token banks


def write_token_bank(bank, path):
    if bank.modality not in MODALITY_CODES:
        raise ConfigError(f"unknown modality {bank.modality!r}")
    with open(path, "wb") as fh:
        fh.write(_BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION,
                                   MODALITY_CODES[bank.modality], 0,
                                   bank.dim, len(bank.sequences)))
        for eid in sorted(bank.sequences):
            seq = np.ascontiguousarray(bank.sequences[eid], dtype="<f4")
            if seq.ndim != 2 or seq.shape[1] != bank.dim:
                raise BankFormatError(
                    f"entity {eid}: sequence shape {seq.shape} does not match dim {bank.dim}")
            fh.write(_ENTITY_HEADER.pack(eid, seq.shape[0]))
            fh.write(seq.tobytes())


def load_token_bank(path, expected_modality=None):
    """Read an MMTK bank; expected_modality=None accepts either modality."""
    if expected_modality is not None and expected_modality not in MODALITY_CODES:
        raise ConfigError(f"unknown modality {expected_modality!r}")
    with open(path, "rb") as fh:
        blob = fh.read()

    if len(blob) < _BANK_HEADER.size:
        raise TruncatedBankError(f"{path}: {len(blob)} bytes is shorter than the header")
    magic, version, modality_code, _reserved, dim, count = _BANK_HEADER.unpack_from(blob, 0)
    if magic != BANK_MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r}, expected {BANK_MAGIC!r}")
    if version != BANK_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {BANK_VERSION}")
    if modality_code not in _CODE_NAMES:
        raise BankFormatError(f"{path}: unknown modality byte {modality_code}")
    if expected_modality is not None and _CODE_NAMES[modality_code] != expected_modality:
        raise ModalityMismatchError(
            f"{path}: holds {_CODE_NAMES[modality_code]} tokens, expected {expected_modality}")
    if dim == 0:
        raise BankFormatError(f"{path}: dim must be positive")

    sequences = {}
    offset = _BANK_HEADER.size
    for _ in range(count):
        if offset + _ENTITY_HEADER.size > len(blob):
            raise TruncatedBankError(f"{path}: entity header past end of file")
        eid, token_count = _ENTITY_HEADER.unpack_from(blob, offset)
        offset += _ENTITY_HEADER.size
        nbytes = token_count * dim * 4
        if offset + nbytes > len(blob):
            raise TruncatedBankError(f"{path}: entity {eid} payload truncated")
        if eid in sequences:
            raise BankFormatError(f"{path}: duplicate entity id {eid}")
        seq = np.frombuffer(blob, dtype="<f4", count=token_count * dim, offset=offset)
        sequences[eid] = seq.reshape(token_count, dim).copy()
        offset += nbytes
    if offset != len(blob):
        raise BankFormatError(f"{path}: {len(blob) - offset} trailing bytes after payload")

    return TokenBank(modality=_CODE_NAMES[modality_code], dim=dim, sequences=sequences)


# ---------------------------------------------------------------------------
# synthetic data


def synth_generate(cfg):
    """Clustered synthetic graph whose modality tokens echo the structure.

    Entities live in latent clusters; each relation maps a head's cluster to
    a fixed target cluster, and token vectors are noisy copies of the entity
    latent. Modality content therefore predicts structural neighborhoods,
    which the contrastive alignment can exploit.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    n_clusters = max(2, min(8, cfg.entity_count // 6))
    cluster_of = rng.integers(0, n_clusters, size=cfg.entity_count)
    # guarantee no cluster is empty so relation targets always have entities
    for c in range(n_clusters):
        if not (cluster_of == c).any():
            cluster_of[rng.integers(0, cfg.entity_count)] = c
    members = [np.flatnonzero(cluster_of == c) for c in range(n_clusters)]
    relation_map = rng.integers(0, n_clusters, size=(cfg.relation_count, n_clusters))

    triples = set()
    ordered = []
    attempts = 0
    cap = 50 * cfg.triple_count + 1000
    while len(ordered) < cfg.triple_count and attempts < cap:
        attempts += 1
        h = int(rng.integers(0, cfg.entity_count))
        r = int(rng.integers(0, cfg.relation_count))
        pool = members[relation_map[r, cluster_of[h]]]
        t = int(pool[rng.integers(0, len(pool))])
        if (h, r, t) not in triples:
            triples.add((h, r, t))
            ordered.append((h, r, t))
    while len(ordered) < cfg.triple_count:
        # cluster-consistent space exhausted; fall back to uniform tails
        h = int(rng.integers(0, cfg.entity_count))
        r = int(rng.integers(0, cfg.relation_count))
        t = int(rng.integers(0, cfg.entity_count))
        if (h, r, t) not in triples:
            triples.add((h, r, t))
            ordered.append((h, r, t))

    perm = rng.permutation(cfg.triple_count)
    shuffled = [ordered[i] for i in perm]
    n_train = int(0.8 * cfg.triple_count)
    n_valid = int(0.1 * cfg.triple_count)
    train = shuffled[:n_train]
    valid = shuffled[n_train:n_train + n_valid]
    test = shuffled[n_train + n_valid:]

    store = TripleStore(
        entity_count=cfg.entity_count,
        relation_count=cfg.relation_count,
        train=train,
        valid=valid,
        test=test,
        filter_index=build_filter_index(cfg.relation_count, train, valid, test),
    )

    centers = rng.normal(size=(n_clusters, cfg.token_dim)) * 2.0
    latents = (centers[cluster_of]
               + 0.3 * rng.normal(size=(cfg.entity_count, cfg.token_dim)))

    banks = []
    for modality in ("visual", "textual"):
        shift = rng.normal(size=cfg.token_dim) * 0.5  # keep the modalities distinct
        sequences = {}
        for eid in range(cfg.entity_count):
            noise = rng.normal(size=(cfg.tokens_per_modality, cfg.token_dim))
            sequences[eid] = (latents[eid] + shift + 0.15 * noise).astype(np.float32)
        banks.append(TokenBank(modality=modality, dim=cfg.token_dim, sequences=sequences))

    return store, banks[0], banks[1]


# ---------------------------------------------------------------------------
# batching


def batch_iter(store, split, batch_size, shuffle_seed):
    """Yield (B, 3) int64 triple batches covering the split exactly once."""
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2 (in-batch negatives need company)")
    triples = np.asarray(store.split(split), dtype=np.int64)
    order = np.random.default_rng(shuffle_seed).permutation(len(triples))
    for start in range(0, len(triples), batch_size):
        yield triples[order[start:start + batch_size]]


# File formats
# ------------
# entity2id / relation2id: one "name<TAB>id" line per entry, UTF-8, ids dense
# from 0. train/valid/test: one "head<TAB>relation<TAB>tail" id line each.
#
# MMTK bank (little-endian): magic "MMTK", version u16 = 1, modality u8
# (1 visual, 2 textual), reserved u8 = 0, dim u32, entity_count u64; then per
# entity: entity_id u64, token_count u32, token_count*dim float32 row-major.
