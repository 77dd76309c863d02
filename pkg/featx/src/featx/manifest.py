"""Extraction manifests: one ``entity_id<TAB>payload`` line per entity,
where the payload is an image path (visual) or a description (textual).

Blank lines and full-line ``#`` comments are skipped. An empty payload is
legal at parse time; the textual extractor skips such entries with a
report, mirroring how unreadable images are handled.
"""

import dataclasses

from .errors import ManifestError


@dataclasses.dataclass(frozen=True)
class Entry:
    entity_id: int
    payload: str


def load_manifest(path):
    entries = []
    seen = set()
    try:
        fh = open(path, encoding="utf-8")
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            left, sep, payload = line.partition("\t")
            if not sep:
                raise ManifestError(
                    f"{path}:{lineno}: expected 'entity_id<TAB>payload', got {line!r}")
            try:
                eid = int(left)
            except ValueError:
                raise ManifestError(
                    f"{path}:{lineno}: entity id {left!r} is not an integer") from None
            if eid < 0:
                raise ManifestError(f"{path}:{lineno}: negative entity id {eid}")
            if eid in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate entity id {eid}")
            seen.add(eid)
            entries.append(Entry(eid, payload))
    if not entries:
        raise ManifestError(f"{path}: empty manifest")
    return entries
