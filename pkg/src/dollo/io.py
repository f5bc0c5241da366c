"""
File formats.

Trait matrix (CSV)::

    taxon,c1,c2,c3
    #class,hand,hand,foot        <- optional meaning-class row
    Kashmiri,1,0,?
    ...

Cells are 0, 1 or ``?``; a gap is read as absence.

Calibrations (semicolon separated, ``#`` comments, ages in years BP)::

    Brythonic; Welsh_N,Welsh_C,Breton_List; 1450; 1600
    Hittite; 3300; 3700                   <- leaf age interval

A dash stands for a missing bound.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np

from . import __version__
from .likelihood import TraitMatrix
from .tree import CalibrationSet, CladeConstraint, LeafAgeInterval, TreeError

log = logging.getLogger(__name__)

CLASS_ROW = "#class"


class ParseError(ValueError):
    pass


def parse_trait_matrix(path) -> TraitMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path}: empty matrix file")
    header = [c.strip() for c in rows[0]]
    trait_ids = header[1:]
    classes = None
    body = rows[1:]
    if body and body[0][0].strip().lower() == CLASS_ROW:
        classes = [c.strip() for c in body[0][1:]]
        if len(classes) != len(trait_ids):
            raise ParseError(f"{path}: line 2: {len(classes)} class tags for {len(trait_ids)} traits")
        body = body[1:]
    taxa, cols = [], []
    gaps = 0
    first_line = 3 if classes is not None else 2
    for r, row in enumerate(body):
        line = r + first_line
        name = row[0].strip()
        if name in taxa:
            raise ParseError(f"{path}: line {line}: duplicate taxon {name!r}")
        cells = [c.strip() for c in row[1:]]
        if len(cells) != len(trait_ids):
            raise ParseError(f"{path}: line {line}: expected {len(trait_ids)} cells, got {len(cells)}")
        vals = []
        for c, cell in enumerate(cells):
            if cell == "1":
                vals.append(True)
            elif cell == "0":
                vals.append(False)
            elif cell == "?":
                vals.append(False)
                gaps += 1
            else:
                raise ParseError(f"{path}: line {line}, column {c + 2} ({trait_ids[c]}): "
                                 f"non-binary cell {cell!r}")
        taxa.append(name)
        cols.append(vals)
    if gaps:
        log.warning("%s: %d missing cells coded as absent", path, gaps)
    presence = np.array(cols, dtype=bool).T.reshape(len(trait_ids), len(taxa))
    try:
        data = TraitMatrix(taxa, presence, trait_ids, classes)
    except ValueError as e:
        raise ParseError(f"{path}: {e}") from None
    data.n_gaps = gaps
    return data


def write_trait_matrix(data: TraitMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["taxon"] + list(data.trait_ids))
        if data.classes is not None:
            w.writerow([CLASS_ROW] + list(data.classes))
        for k, name in enumerate(data.taxa):
            w.writerow([name] + ["1" if v else "0" for v in data.presence[:, k]])


def _bound(text: str, path, line):
    text = text.strip()
    if text in ("-", ""):
        return None
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"{path}: line {line}: bad age {text!r}") from None


def parse_calibrations(path, taxa=None) -> CalibrationSet:
    cal = CalibrationSet()
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    known = None if taxa is None else set(taxa)
    for n, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        fields = [f.strip() for f in text.split(";")]
        try:
            if len(fields) == 4:
                name, members, lo, hi = fields
                members = [m.strip() for m in members.split(",") if m.strip()]
                if known is not None:
                    bad = [m for m in members if m not in known]
                    if bad:
                        raise ParseError(f"{path}: line {n}: unknown taxa {bad}")
                clade = CladeConstraint(name, frozenset(members), _bound(lo, path, n), _bound(hi, path, n))
                if clade.lower is not None and clade.upper is None:
                    log.warning("%s: line %d: clade %s has no upper bound and does not "
                                "fix the time scale on its own", path, n, name)
                cal.clades.append(clade)
            elif len(fields) == 3:
                taxon, lo, hi = fields
                if known is not None and taxon not in known:
                    raise ParseError(f"{path}: line {n}: unknown taxon {taxon!r}")
                lo, hi = _bound(lo, path, n), _bound(hi, path, n)
                if lo is None or hi is None:
                    raise ParseError(f"{path}: line {n}: leaf ages need both bounds")
                cal.leaf_ages[taxon] = LeafAgeInterval(taxon, lo, hi)
            else:
                raise ParseError(f"{path}: line {n}: expected 3 or 4 ';'-separated fields")
        except TreeError as e:
            raise ParseError(f"{path}: line {n}: {e}") from None
    return cal


def write_calibrations(cal: CalibrationSet, path) -> None:
    def b(x):
        return "-" if x is None else repr(float(x))

    with open(path, "w", encoding="utf-8") as fh:
        for c in cal.clades:
            fh.write(f"{c.name}; {','.join(sorted(c.taxa))}; {b(c.lower)}; {b(c.upper)}\n")
        for iv in cal.leaf_ages.values():
            fh.write(f"{iv.taxon}; {b(iv.t_minus)}; {b(iv.t_plus)}\n")


def write_truth(result, path) -> None:
    """Ground-truth sidecar for a simulated matrix."""
    doc = {
        "scenario": result.code,
        "tree": result.tree.to_newick(),
        "root_age": result.tree.root_age,
        "leaf_ages": {nm: float(result.tree.ages[k]) for k, nm in enumerate(result.tree.names)},
        "births": [
            {"trait": tid, "node_taxa": sorted(result.tree.mask_names(result.tree.leaf_masks()[int(n)])),
             "age": float(a)}
            for tid, n, a in zip(result.data.trait_ids, result.birth_node, result.birth_age)
        ],
    }
    if result.class_rates is not None:
        doc["class_rates"] = [float(x) for x in result.class_rates]
    if result.edge_rates is not None:
        doc["edge_rates"] = [float(x) for x in result.edge_rates]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(outdir, command: str, params: dict, inputs=(), seed=None) -> Path:
    outdir = Path(outdir)
    doc = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "params": params,
        "inputs": {str(p): file_digest(p) for p in inputs if p and os.path.exists(p)},
    }
    path = outdir / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=str)
    return path
