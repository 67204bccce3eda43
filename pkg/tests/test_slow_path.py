"""Slow path: routing, database order, proxy wiring, H_slow selection."""

import numpy as np
import pytest

from imagerag.fast_path import CuePath, VisualCue, build_similarity
from imagerag.imaging import Box, DivisionMethod, PatchSpec
from imagerag.slow_path import Route, route, run_slow_path, select_cues_slow
from imagerag.store import ProxyMethod

from conftest import DIM, basis
from oracles import select_slow_oracle


def make_patches(m):
    return [
        PatchSpec("img", Box(j, 0, j + 1, 1), 1, DivisionMethod.CASCADE_GRID)
        for j in range(m)
    ]


def cue(conf):
    return VisualCue(
        patch=make_patches(1)[0], confidence=conf, matched_by="x", path=CuePath.FAST
    )


class TestRoute:
    def test_fast_wins_with_one_cue(self):
        assert route([cue(0.9)]) == Route.USE_FAST

    def test_slow_on_empty(self):
        assert route([]) == Route.USE_SLOW


class TestSelectSlow:
    def test_planted_proxy_hits_patch(self):
        proxies = basis(5)[None, :]
        patches = np.stack([basis(i) for i in range(10)])
        sim = build_similarity(proxies, patches, gamma=100.0)
        cues = select_cues_slow(sim, max_cues=3, patches=make_patches(10))
        assert cues[0].patch.box.x1 == 5
        assert cues[0].confidence > 0.99

    def test_at_most_three(self):
        rng = np.random.default_rng(3)
        rows = rng.standard_normal((4, DIM))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        cols = rng.standard_normal((10, DIM))
        cols /= np.linalg.norm(cols, axis=1, keepdims=True)
        sim = build_similarity(rows, cols, gamma=10.0)
        cues = select_cues_slow(sim, max_cues=3, patches=make_patches(10))
        assert len(cues) <= 3
        assert len({c.patch.patch_id for c in cues}) == len(cues)

    def test_oracle_equivalence_random(self):
        rng = np.random.default_rng(77)
        for trial in range(200):
            n = int(rng.integers(1, 9))
            m = int(rng.integers(2, 33))
            raw = rng.uniform(-1.0, 1.0, size=(n, m))
            gamma = float(rng.uniform(0.5, 120.0))
            max_cues = int(rng.integers(1, 5))
            whole = int(rng.integers(0, m)) if rng.random() < 0.3 else None
            eps = float(rng.uniform(0.0, 0.8)) if rng.random() < 0.3 else None
            from imagerag.fast_path import SimilarityMatrix, softmax_rows

            sim = SimilarityMatrix(
                row_labels=[f"r{i}" for i in range(n)],
                col_ids=[f"c{j}" for j in range(m)],
                raw=raw,
                softmaxed=softmax_rows(gamma * raw),
                gamma=gamma,
                whole_image_col=whole,
            )
            got = select_cues_slow(
                sim, max_cues=max_cues, patches=make_patches(m), epsilon=eps
            )
            expected = select_slow_oracle(
                raw.tolist(), gamma, max_cues, whole_col=whole, epsilon=eps
            )
            assert [(c.patch.box.x1) for c in got] == [j for j, _ in expected], trial
            for c, (_, conf) in zip(got, expected):
                assert c.confidence == pytest.approx(conf, abs=1e-12)

    def test_cues_carry_slow_path_and_label(self):
        proxies = np.stack([basis(2), basis(7)])
        patches = np.stack([basis(i) for i in range(10)])
        sim = build_similarity(
            proxies, patches, gamma=100.0, row_labels=["tank", "pond"]
        )
        cues = select_cues_slow(sim, max_cues=2, patches=make_patches(10))
        assert {c.path for c in cues} == {CuePath.SLOW}
        assert {c.matched_by for c in cues} == {"tank", "pond"}


class TestRunSlowPath:
    def _run(self, world, phrases, proxy_method=ProxyMethod.CLUSTERING):
        patches = world.cols
        vec_map = world.gateway.embed_patches(world.image, patches)
        patch_matrix = np.stack([vec_map[p.patch_id] for p in patches])
        phrase_vectors = {
            p: world.gateway.embed_text_ensemble(p) for p in phrases
        }
        return run_slow_path(
            phrases,
            phrase_vectors,
            patch_matrix,
            patches,
            world.lrsd,
            world.crsd,
            world.gateway.embed_sentence,
            gamma=100.0,
            proxy_method=proxy_method,
            whole_image_col=len(patches) - 1,
        )

    def test_lrsd_hit_selects_planted_patch(self, world):
        cues, trace = self._run(world, ["storage tank"])
        assert trace.lrsd_hits == ["storage tank"]
        assert trace.crsd_hits == []
        assert trace.outcome == "cues"
        assert cues[0].patch.patch_id == world.patches[2].patch_id
        assert cues[0].matched_by == "storage tank"

    def test_crsd_only_after_lrsd_miss(self, world):
        cues, trace = self._run(world, ["pond area"])
        assert trace.lrsd_hits == []
        assert trace.crsd_hits == ["water feature"]
        assert cues[0].patch.patch_id == world.patches[4].patch_id

    def test_no_hits_returns_empty(self, world):
        cues, trace = self._run(world, ["unknown thing"])
        assert cues == []
        assert trace.outcome == "empty"
        assert trace.lrsd_hits == [] and trace.crsd_hits == []

    def test_reranking_uses_phrase_feature(self, world):
        cues, trace = self._run(
            world, ["storage tank"], proxy_method=ProxyMethod.RERANKING
        )
        assert trace.proxies[0].method == ProxyMethod.RERANKING
        assert cues[0].patch.patch_id == world.patches[2].patch_id

    def test_prototype_method(self, world):
        cues, trace = self._run(
            world, ["storage tank"], proxy_method=ProxyMethod.PROTOTYPE
        )
        assert trace.proxies[0].method == ProxyMethod.PROTOTYPE
        assert trace.proxies[0].support_count == 10
        assert cues[0].patch.patch_id == world.patches[2].patch_id

    def test_determinism(self, world):
        first = self._run(world, ["storage tank"])
        second = self._run(world, ["storage tank"])
        assert [c.patch.patch_id for c in first[0]] == [
            c.patch.patch_id for c in second[0]
        ]
        assert first[1].as_dict() == second[1].as_dict()
