"""
BPS Service Module - Best Prediction Selection
Fuses per-RoI binary segmentations into one frame-wide instance labeling
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from domain import BACKGROUND, InstanceId, InstanceLabeling


@dataclass(frozen=True)
class BpsConfig:
    t_conf: float = 0.5
    w_bb: float = 0.75
    w_pc: float = 0.25

    def score(self, vote: 'Vote') -> float:
        return self.w_bb * vote.c_bb + self.w_pc * vote.pc


def validate_bps_config(config: BpsConfig) -> Tuple[bool, str]:
    if not 0.0 <= config.t_conf <= 1.0:
        return False, 't_conf must lie in [0, 1].'
    if config.w_bb < 0 or config.w_pc < 0:
        return False, 'BPS weights cannot be negative.'
    if not math.isclose(config.w_bb + config.w_pc, 1.0, abs_tol=1e-9):
        return False, 'BPS weights must sum to 1.'
    return True, ''


@dataclass(frozen=True)
class RoiVotes:
    """One RoI's binary segmentation output: a confidence pc per captured Stixel."""
    box_label: int
    box_conf: float
    stixel_ids: Tuple[int, ...]
    pc: Tuple[float, ...]

    @classmethod
    def of(cls, box_label: int, box_conf: float, stixel_ids: Sequence[int], pc: Sequence[float]) -> 'RoiVotes':
        if len(stixel_ids) != len(pc):
            raise ValueError('RoiVotes needs one pc per Stixel.')
        return cls(int(box_label), float(box_conf), tuple(int(s) for s in stixel_ids),
                   tuple(float(p) for p in np.asarray(pc, dtype=np.float64)))


@dataclass(frozen=True)
class Vote:
    """
    One RoI's claim on one Stixel.

    roi_index is the RoI's rank after sorting by descending box confidence,
    so a lower index means a more confident box.
    """
    stixel_id: int
    roi_index: int
    pc: float
    c_bb: float
    box_label: int


def rank_rois(rois: Sequence[RoiVotes]) -> List[RoiVotes]:
    """RoIs by descending box confidence, input order breaking ties."""
    order = sorted(range(len(rois)), key=lambda i: (-rois[i].box_conf, i))
    return [rois[i] for i in order]


def collect_votes(stixel_ids: Sequence[int], rois: Sequence[RoiVotes]) -> Dict[int, List[Vote]]:
    """
    Vote lists for every frame Stixel: empty (never captured), one, or several.

    Raises:
        KeyError: a RoI references a Stixel outside the frame
    """
    votes: Dict[int, List[Vote]] = {int(sid): [] for sid in stixel_ids}
    for rank, roi in enumerate(rank_rois(rois)):
        for sid, pc in zip(roi.stixel_ids, roi.pc):
            if sid not in votes:
                raise KeyError(f"RoI references unknown Stixel {sid}.")
            votes[sid].append(Vote(sid, rank, pc, roi.box_conf, roi.box_label))
    return votes


def _winner(votes: Sequence[Vote], config: BpsConfig):
    best = None
    best_key = None
    for vote in votes:
        if not vote.pc > config.t_conf:
            continue
        key = (-config.score(vote), vote.roi_index)
        if best_key is None or key < best_key:
            best, best_key = vote, key
    return best


def select(frame_id: str, votes: Dict[int, List[Vote]], config: BpsConfig = BpsConfig()) -> InstanceLabeling:
    """
    Assign every Stixel one instance ID.

    Only votes with pc > t_conf compete; the highest w_bb*c_bb + w_pc*pc wins,
    ties going to the lower RoI index. Surviving RoIs become instances
    (box_label, dense per-class counter in RoI index order) with confidence c_bb.
    """
    winners = {sid: _winner(vs, config) for sid, vs in votes.items()}
    surviving: Dict[int, Vote] = {}
    for vote in winners.values():
        if vote is not None:
            surviving.setdefault(vote.roi_index, vote)

    ids: Dict[int, InstanceId] = {}
    confidences: Dict[InstanceId, float] = {}
    counters: Dict[int, int] = {}
    for roi_index in sorted(surviving):
        vote = surviving[roi_index]
        counters[vote.box_label] = counters.get(vote.box_label, 0) + 1
        iid = InstanceId(vote.box_label, counters[vote.box_label])
        ids[roi_index] = iid
        confidences[iid] = vote.c_bb

    labels = {sid: (BACKGROUND if vote is None else ids[vote.roi_index]) for sid, vote in winners.items()}
    return InstanceLabeling(frame_id, labels, confidences)


def fuse(frame_id: str, stixel_ids: Sequence[int], rois: Sequence[RoiVotes],
         config: BpsConfig = BpsConfig()) -> InstanceLabeling:
    """
    collect_votes followed by select, computed on flat vote arrays.

    Raises:
        KeyError: a RoI references a Stixel outside the frame
    """
    labels: Dict[int, InstanceId] = {int(sid): BACKGROUND for sid in stixel_ids}
    ranked = rank_rois(rois)
    if not ranked:
        return InstanceLabeling(frame_id, labels, {})
    sids = np.concatenate([np.asarray(r.stixel_ids, dtype=np.int64) for r in ranked])
    pcs = np.concatenate([np.asarray(r.pc, dtype=np.float64) for r in ranked])
    ranks = np.repeat(np.arange(len(ranked)), [len(r.stixel_ids) for r in ranked])
    unknown = ~np.isin(sids, np.fromiter(labels, dtype=np.int64, count=len(labels)))
    if unknown.any():
        raise KeyError(f"RoI references unknown Stixel {int(sids[unknown][0])}.")

    keep = pcs > config.t_conf
    sids, pcs, ranks = sids[keep], pcs[keep], ranks[keep]
    c_bb = np.array([r.box_conf for r in ranked], dtype=np.float64)[ranks]
    scores = config.w_bb * c_bb + config.w_pc * pcs
    # per Stixel: highest score first, lower RoI index on ties
    order = np.lexsort((ranks, -scores, sids))
    sids, ranks = sids[order], ranks[order]
    first = np.flatnonzero(np.concatenate(([True], sids[1:] != sids[:-1]))) if sids.size else sids

    ids: Dict[int, InstanceId] = {}
    confidences: Dict[InstanceId, float] = {}
    counters: Dict[int, int] = {}
    for rank in np.unique(ranks[first]):
        roi = ranked[int(rank)]
        counters[roi.box_label] = counters.get(roi.box_label, 0) + 1
        iid = InstanceId(roi.box_label, counters[roi.box_label])
        ids[int(rank)] = iid
        confidences[iid] = roi.box_conf
    for sid, rank in zip(sids[first], ranks[first]):
        labels[int(sid)] = ids[int(rank)]
    return InstanceLabeling(frame_id, labels, confidences)


def bps_oracle(frame_id: str, stixel_ids: Sequence[int], rois: Sequence[RoiVotes],
               config: BpsConfig = BpsConfig()) -> InstanceLabeling:
    """Exhaustive per-Stixel enumeration of the selection rule, for cross-checking select."""
    ranked = rank_rois(rois)
    winner_roi: Dict[int, int] = {}
    for sid in stixel_ids:
        candidates = []
        for r, roi in enumerate(ranked):
            for s, pc in zip(roi.stixel_ids, roi.pc):
                if s == sid and pc > config.t_conf:
                    candidates.append((r, config.w_bb * roi.box_conf + config.w_pc * pc))
        for r, score in candidates:
            beaten = any(o_score > score or (o_score == score and o < r) for o, o_score in candidates)
            if not beaten:
                winner_roi[sid] = r

    labels: Dict[int, InstanceId] = {}
    confidences: Dict[InstanceId, float] = {}
    for sid in stixel_ids:
        if sid not in winner_roi:
            labels[sid] = BACKGROUND
            continue
        r = winner_roi[sid]
        label = ranked[r].box_label
        # counter: number of surviving same-class RoIs up to and including r
        counter = sum(1 for o in range(r + 1)
                      if ranked[o].box_label == label and o in winner_roi.values())
        iid = InstanceId(label, counter)
        labels[sid] = iid
        confidences[iid] = ranked[r].box_conf
    return InstanceLabeling(frame_id, labels, confidences)
