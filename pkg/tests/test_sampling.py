import numpy as np
import pytest
import torch

from cocoseg import losses, sampling


class TestFuseLabels:
    def _mats(self, b=4, h=4, w=4, seed=0):
        g = torch.Generator().manual_seed(seed)
        gt = torch.randint(0, 4, (b, h, w), generator=g)
        p_cnn = torch.randint(0, 4, (b, h, w), generator=g)
        p_attn = torch.randint(0, 4, (b, h, w), generator=g)
        return gt, p_cnn, p_attn

    def test_all_labeled(self):
        gt, p_cnn, p_attn = self._mats()
        is_lab = torch.ones(4, dtype=torch.bool)
        m_cnn, m_attn = sampling.fuse_labels(is_lab, gt, p_cnn, p_attn)
        assert torch.equal(m_cnn.labels, gt) and torch.equal(m_attn.labels, gt)
        assert set(m_cnn.source) == {sampling.SOURCE_GROUND_TRUTH}
        assert set(m_attn.source) == {sampling.SOURCE_GROUND_TRUTH}

    def test_all_unlabeled_crossed(self):
        gt, p_cnn, p_attn = self._mats()
        is_lab = torch.zeros(4, dtype=torch.bool)
        m_cnn, m_attn = sampling.fuse_labels(is_lab, None, p_cnn, p_attn)
        assert torch.equal(m_cnn.labels, p_attn)
        assert torch.equal(m_attn.labels, p_cnn)
        assert set(m_cnn.source) == {sampling.SOURCE_CROSS_FOR_CNN}
        assert set(m_attn.source) == {sampling.SOURCE_CROSS_FOR_ATTN}

    def test_mixed_batch_per_slice(self):
        gt, p_cnn, p_attn = self._mats()
        is_lab = torch.tensor([True, True, False, False])
        m_cnn, m_attn = sampling.fuse_labels(is_lab, gt, p_cnn, p_attn)
        for i in range(4):
            if is_lab[i]:
                assert torch.equal(m_cnn.labels[i], gt[i])
                assert torch.equal(m_attn.labels[i], gt[i])
                assert m_cnn.source[i] == sampling.SOURCE_GROUND_TRUTH
            else:
                assert torch.equal(m_cnn.labels[i], p_attn[i])
                assert torch.equal(m_attn.labels[i], p_cnn[i])

    def test_unlabeled_cnn_labels_never_from_cnn(self):
        # Provenance check: make both pseudo maps disjoint in value ranges.
        b, h, w = 3, 4, 4
        p_cnn = torch.zeros(b, h, w, dtype=torch.long)
        p_attn = torch.ones(b, h, w, dtype=torch.long)
        is_lab = torch.zeros(b, dtype=torch.bool)
        m_cnn, m_attn = sampling.fuse_labels(is_lab, None, p_cnn, p_attn)
        assert (m_cnn.labels == 1).all()  # attention's prediction, not its own
        assert (m_attn.labels == 0).all()
        assert all(s == sampling.SOURCE_CROSS_FOR_CNN for s in m_cnn.source)

    def test_shape_mismatch(self):
        gt, p_cnn, p_attn = self._mats()
        with pytest.raises(ValueError):
            sampling.fuse_labels(torch.ones(3, dtype=torch.bool), gt, p_cnn, p_attn)


class TestDownsampleLabels:
    def test_identity_at_same_size(self):
        labels = torch.randint(0, 4, (2, 6, 6))
        out = sampling.downsample_labels(labels, (6, 6))
        assert torch.equal(out, labels)

    def test_constant_map(self):
        labels = torch.full((1, 8, 8), 3, dtype=torch.long)
        out = sampling.downsample_labels(labels, (2, 2))
        assert (out == 3).all() and out.shape == (1, 2, 2)

    def test_checkerboard_hand_enumeration(self):
        # Cell centres of a 4x4 -> 2x2 subsample sit at indices
        # floor((i+0.5)*2) = 1 and 3; the checkerboard (r+c) % 2 is 0 at all
        # four sampled coordinates (1,1), (1,3), (3,1), (3,3).
        rr, cc = np.mgrid[0:4, 0:4]
        board = torch.as_tensor((rr + cc) % 2)[None]
        out = sampling.downsample_labels(board, (2, 2))
        assert torch.equal(out, torch.zeros(1, 2, 2, dtype=out.dtype))

    def test_index_rule_on_random_maps(self):
        g = torch.Generator().manual_seed(1)
        labels = torch.randint(0, 5, (2, 13, 9), generator=g)
        out = sampling.downsample_labels(labels, (4, 3))
        for i in range(4):
            for j in range(3):
                r = int((i + 0.5) * 13 / 4)
                c = int((j + 0.5) * 9 / 3)
                assert torch.equal(out[:, i, j], labels[:, r, c])

    def test_classes_never_interpolated(self):
        labels = torch.tensor([[[0, 3], [3, 0]]])
        out = sampling.downsample_labels(labels, (1, 1))
        assert out.item() in (0, 3)

    def test_upsample_rejected(self):
        with pytest.raises(ValueError):
            sampling.downsample_labels(torch.zeros(1, 4, 4, dtype=torch.long), (8, 8))


class TestPartitionPatches:
    def test_8x8_patch4_uses_every_cell_once(self):
        groups = sampling.partition_patches(6, (8, 8), 4, np.random.default_rng(0))
        assert len(groups) == 4
        for m in range(6):
            used = {tuple(g.origins[m]) for g in groups}
            assert used == {(0, 0), (0, 4), (4, 0), (4, 4)}

    def test_whole_map_patch(self):
        groups = sampling.partition_patches(3, (8, 8), 8, np.random.default_rng(0))
        assert len(groups) == 1
        assert all(tuple(o) == (0, 0) for o in groups[0].origins)

    def test_margin_excluded_when_indivisible(self):
        groups = sampling.partition_patches(2, (9, 9), 4, np.random.default_rng(0))
        assert len(groups) == 4
        for g in groups:
            for r, c in g.origins:
                assert r in (0, 4) and c in (0, 4)

    def test_exhaustive_and_without_replacement_random_combos(self):
        rng = np.random.default_rng(123)
        for _ in range(30):
            h = int(rng.integers(4, 33))
            w = int(rng.integers(4, 33))
            p = int(rng.integers(1, min(h, w) + 1))
            n_maps = int(rng.integers(1, 6))
            groups = sampling.partition_patches(n_maps, (h, w), p, rng)
            gh, gw = h // p, w // p
            assert len(groups) == gh * gw
            expected = {(r * p, c * p) for r in range(gh) for c in range(gw)}
            for m in range(n_maps):
                seen = [tuple(g.origins[m]) for g in groups]
                assert len(set(seen)) == len(seen)  # no replacement
                assert set(seen) == expected  # exhaustive traversal

    def test_determinism_under_fixed_seed(self):
        a = sampling.partition_patches(4, (16, 16), 4, np.random.default_rng(99))
        b = sampling.partition_patches(4, (16, 16), 4, np.random.default_rng(99))
        for ga, gb in zip(a, b):
            np.testing.assert_array_equal(ga.origins, gb.origins)

    def test_random_offset_stays_in_bounds_and_exhaustive(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            groups = sampling.partition_patches(2, (10, 10), 3, rng, random_offset=True)
            assert len(groups) == 9
            for g in groups:
                assert (g.origins >= 0).all()
                assert (g.origins + 3 <= 10).all()
            for m in range(2):
                assert len({tuple(g.origins[m]) for g in groups}) == 9

    def test_patch_larger_than_map_rejected(self):
        with pytest.raises(ValueError):
            sampling.partition_patches(1, (4, 4), 5, np.random.default_rng(0))


class TestBuildAnchorSet:
    def _setup(self, n_maps=2, d=3, h=4, w=4, seed=0):
        g = torch.Generator().manual_seed(seed)
        emb = torch.randn(n_maps, d, h, w, generator=g)
        emb = emb / emb.norm(dim=1, keepdim=True)
        labels = torch.randint(0, 3, (n_maps, h, w), generator=g)
        return emb, labels

    def test_row_count_and_provenance(self):
        emb, labels = self._setup()
        group = sampling.partition_patches(2, (4, 4), 2, np.random.default_rng(0))[0]
        aset = sampling.build_anchor_set(group, emb, labels, torch.tensor([0, 1]))
        assert aset.embeddings.shape == (8, 3)
        assert aset.labels.shape == (8,)
        assert aset.branch.tolist() == [0, 0, 0, 0, 1, 1, 1, 1]

    def test_rows_match_origins(self):
        emb, labels = self._setup()
        group = sampling.partition_patches(2, (4, 4), 2, np.random.default_rng(1))[2]
        aset = sampling.build_anchor_set(group, emb, labels, torch.tensor([0, 1]))
        r0, c0 = (int(v) for v in group.origins[0])
        want = emb[0, :, r0 : r0 + 2, c0 : c0 + 2].reshape(3, -1).T
        assert torch.equal(aset.embeddings[:4], want)
        assert torch.equal(aset.labels[:4], labels[0, r0 : r0 + 2, c0 : c0 + 2].reshape(-1))

    def test_labeled_only_rows_are_ground_truth(self):
        emb, _ = self._setup()
        gt = torch.randint(0, 3, (2, 4, 4))
        group = sampling.partition_patches(2, (4, 4), 4, np.random.default_rng(0))[0]
        aset = sampling.build_anchor_set(group, emb, gt, torch.tensor([0, 1]))
        assert torch.equal(aset.labels.reshape(2, 4, 4), gt)

    def test_background_mask_toggle(self):
        emb, labels = self._setup()
        labels[:, :2] = 0
        group = sampling.partition_patches(2, (4, 4), 4, np.random.default_rng(0))[0]
        aset = sampling.build_anchor_set(
            group, emb, labels, torch.tensor([0, 1]), anchor_background=False
        )
        assert not aset.valid_mask[aset.labels == 0].any()
        assert aset.valid_mask[aset.labels != 0].all()

    def test_identical_branches_match_single_branch_loss(self):
        # Per-class prototype embeddings: concatenating an identical copy of
        # the branch leaves the loss unchanged (copies of identical vectors).
        torch.manual_seed(3)
        protos = torch.randn(3, 5, dtype=torch.float64)
        protos = protos / protos.norm(dim=1, keepdim=True)
        labels1 = torch.randint(0, 3, (1, 4, 4))
        emb1 = protos[labels1.reshape(-1)].T.reshape(1, 5, 4, 4)
        emb2 = torch.cat([emb1, emb1])
        labels2 = torch.cat([labels1, labels1])
        g1 = sampling.partition_patches(1, (4, 4), 4, np.random.default_rng(0))[0]
        g2 = sampling.partition_patches(2, (4, 4), 4, np.random.default_rng(0))[0]
        s1 = sampling.build_anchor_set(g1, emb1, labels1, torch.tensor([0]))
        s2 = sampling.build_anchor_set(g2, emb2, labels2, torch.tensor([0, 1]))
        a = float(losses.balanced_contrastive_loss(s1, tau=0.1))
        b = float(losses.balanced_contrastive_loss(s2, tau=0.1))
        assert a == pytest.approx(b, rel=1e-9)


class TestStackGroups:
    def test_matches_per_group_construction(self):
        g = torch.Generator().manual_seed(7)
        n_maps, d, h, w = 4, 6, 8, 8
        emb = torch.randn(n_maps, d, h, w, generator=g)
        labels = torch.randint(0, 4, (n_maps, h, w), generator=g)
        groups = sampling.partition_patches(n_maps, (h, w), 2, np.random.default_rng(3))
        E, L, V = sampling.stack_groups(groups, emb, labels, anchor_background=False)
        assert E.shape == (16, n_maps * 4, d)
        for k, group in enumerate(groups):
            aset = sampling.build_anchor_set(
                group, emb, labels, torch.arange(n_maps), anchor_background=False
            )
            assert torch.equal(E[k], aset.embeddings)
            assert torch.equal(L[k], aset.labels)
            assert torch.equal(V[k], aset.valid_mask)
