import numpy as np
import pytest

from sparsedit import (
    BinaryMask,
    CacheStore,
    PromptTokens,
    Role,
    SharedTokenMap,
    UNet,
    UNetConfig,
    build_pyramid,
    centered_square_mask,
    detect_mask,
    edit,
    embed_tokens,
    generate_dense,
    initial_latent,
    select_gather_plan,
)
from sparsedit.errors import CacheMissError, ConfigError
from sparsedit.unet import (
    ControlledMode,
    DenseMode,
    EditSession,
    SparseMode,
    _MacsCounter,
    _sparse_contexts,
    _step_scale,
)

from conftest import NEW_IDS, OLD_IDS, fresh_generation


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            UNetConfig(latent_h=48)
        with pytest.raises(ConfigError):
            UNetConfig(channels=(6,), groups=4)
        with pytest.raises(ConfigError):
            # seven levels need divisibility by 64
            UNetConfig(latent_h=32, latent_w=32, channels=(8,) * 7, groups=4)
        with pytest.raises(ConfigError):
            UNetConfig(t1=7, t2=5)
        with pytest.raises(ConfigError):
            UNetConfig(steps=8, t2=10)

    def test_json_roundtrip(self, tiny_config):
        assert UNetConfig.from_json(tiny_config.to_json()) == tiny_config

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            UNetConfig.from_json({"latent_hh": 32})

    def test_gating_follows_resolution(self, tiny_config):
        unet = UNet(tiny_config)
        for info in unet.layers:
            area = info.h * info.w
            latent_area = tiny_config.latent_h * tiny_config.latent_w
            assert info.gated == (area >= tiny_config.gate_fraction * latent_area)
        assert any(i.gated for i in unet.layers)


class TestTokens:
    def test_embedding_deterministic_per_seed(self, tiny_config):
        a = embed_tokens(PromptTokens((3, 5)), tiny_config)
        b = embed_tokens(PromptTokens((3, 5)), tiny_config)
        assert np.array_equal(a, b)
        other = embed_tokens(PromptTokens((3, 5)), UNetConfig(**{**tiny_config.to_json(), "seed": 99}))
        assert not np.array_equal(a, other)

    def test_same_id_same_embedding(self, tiny_config):
        e = embed_tokens(PromptTokens((4, 9, 4)), tiny_config)
        assert np.array_equal(e[0], e[2])

    def test_out_of_vocab_rejected(self, tiny_config):
        with pytest.raises(ConfigError, match="vocabulary"):
            embed_tokens(PromptTokens((tiny_config.vocab_size,)), tiny_config)


class TestSharedTokenMap:
    def test_replacement(self):
        m = SharedTokenMap.from_ids((3, 5, 7), (3, 9, 7))
        assert m.pairs == ((0, 0), (2, 2))

    def test_insertion(self):
        m = SharedTokenMap.from_ids((3, 5, 7), (3, 5, 11, 7))
        assert m.pairs == ((0, 0), (1, 1), (2, 3))

    def test_identical(self):
        m = SharedTokenMap.from_ids((1, 2, 3), (1, 2, 3))
        assert m.pairs == ((0, 0), (1, 1), (2, 2))

    def test_strictly_increasing_enforced(self):
        with pytest.raises(Exception):
            SharedTokenMap(((1, 1), (1, 2)))


class TestSessionValidation:
    def test_detection_window_capped_at_ten(self, tiny_generation):
        store, _ = tiny_generation
        config = UNetConfig(
            latent_h=32, latent_w=32, channels=(8, 16), steps=12, t1=2, t2=3, text_dim=8, seed=7
        )
        with pytest.raises(ConfigError, match="step 10"):
            EditSession.create(OLD_IDS, NEW_IDS, config, store, t2=12)
        # a user mask never runs detection, so any t2 <= steps is fine
        mask = centered_square_mask(32, 32, 0.1)
        EditSession.create(OLD_IDS, NEW_IDS, config, store, user_mask=mask, t2=12)


class TestGenerateDense:
    def test_deterministic(self, tiny_config):
        a = generate_dense(PromptTokens(OLD_IDS), tiny_config)
        b = generate_dense(PromptTokens(OLD_IDS), tiny_config)
        assert np.array_equal(a, b)

    def test_seed_changes_output(self, tiny_config):
        other = UNetConfig(**{**tiny_config.to_json(), "seed": 123})
        a = generate_dense(PromptTokens(OLD_IDS), tiny_config)
        b = generate_dense(PromptTokens(OLD_IDS), other)
        assert not np.array_equal(a, b)

    def test_single_step_composition(self):
        config = UNetConfig(
            latent_h=32, latent_w=32, channels=(8,), steps=1, t1=1, t2=1, text_dim=8, seed=3
        )
        unet = UNet(config)
        prompt = PromptTokens((2, 4))
        text = embed_tokens(prompt, config)
        init = initial_latent(config)
        delta = unet.forward(init, 1, text, DenseMode(config.groups))
        want = init - _step_scale(config) * delta
        assert np.array_equal(generate_dense(prompt, config), want)

    def test_store_holds_every_role(self, tiny_config, tiny_generation):
        store, _ = tiny_generation
        unet = UNet(tiny_config)
        for t in (1, tiny_config.steps):
            for info in unet.layers:
                assert store.contains((t, info.layer_id, Role.LAYER_OUTPUT))
                if info.kind == "norm":
                    assert store.contains((t, info.layer_id, Role.NORM_MEAN))
                    assert store.contains((t, info.layer_id, Role.NORM_VAR))
                if info.kind == "cross_attn":
                    assert store.contains((t, info.layer_id, Role.CROSS_ATTN_MAP))
            assert store.contains((t, 0, Role.STEP_LATENT))


class TestControlledMode:
    def test_identical_prompts_replay_bit_exact(self, tiny_config, tiny_generation):
        store, _ = tiny_generation
        unet = UNet(tiny_config)
        prompt = PromptTokens(OLD_IDS)
        text = embed_tokens(prompt, tiny_config)
        shared = SharedTokenMap.from_ids(OLD_IDS, OLD_IDS)
        latent = initial_latent(tiny_config)
        scale = _step_scale(tiny_config)
        for t in range(1, tiny_config.steps + 1):
            maps = {
                lid: store.get((t, lid, Role.CROSS_ATTN_MAP)) for lid in unet.cross_layers
            }
            mode = ControlledMode(tiny_config, maps, shared, len(OLD_IDS))
            latent = latent - scale * unet.forward(latent, t, text, mode)
            cached = store.get((t, 0, Role.STEP_LATENT))
            assert np.array_equal(latent, cached)

    def test_changed_prompt_diverges(self, tiny_config, tiny_generation):
        store, _ = tiny_generation
        unet = UNet(tiny_config)
        text = embed_tokens(PromptTokens(NEW_IDS), tiny_config)
        shared = SharedTokenMap.from_ids(OLD_IDS, NEW_IDS)
        latent = initial_latent(tiny_config)
        maps = {lid: store.get((1, lid, Role.CROSS_ATTN_MAP)) for lid in unet.cross_layers}
        mode = ControlledMode(tiny_config, maps, shared, len(NEW_IDS))
        delta = unet.forward(latent, 1, text, mode)
        dense_delta = unet.forward(latent, 1, text, DenseMode(tiny_config.groups))
        assert not np.array_equal(delta, dense_delta)


class TestForwardModes:
    def _sparse_mode(self, config, store, t, mask, macs=None):
        unet = UNet(config)
        pyramid = build_pyramid(mask, config.levels)
        plans = {
            level: select_gather_plan(pyramid.levels[level], (3, 3))
            for level in sorted({i.level for i in unet.layers if i.gated})
        }
        contexts = _sparse_contexts(unet, store, t)
        return unet, SparseMode(config, pyramid, plans, contexts, macs=macs)

    def test_sparse_full_mask_matches_dense_per_step(self, tiny_config, tiny_generation):
        store, _ = tiny_generation
        t = tiny_config.steps
        prev = store.get((t - 1, 0, Role.STEP_LATENT))
        text = embed_tokens(PromptTokens(OLD_IDS), tiny_config)
        mask = BinaryMask.full(tiny_config.latent_h, tiny_config.latent_w)
        unet, mode = self._sparse_mode(tiny_config, store, t, mask)
        sparse_delta = unet.forward(prev, t, text, mode)
        dense_delta = unet.forward(prev, t, text, DenseMode(tiny_config.groups))
        assert np.abs(sparse_delta - dense_delta).max() <= 1e-4

    def test_sparse_empty_mask_replays_cached_step(self, tiny_config, tiny_generation):
        store, _ = tiny_generation
        t = tiny_config.steps
        prev = store.get((t - 1, 0, Role.STEP_LATENT))
        text = embed_tokens(PromptTokens(OLD_IDS), tiny_config)
        mask = BinaryMask.empty(tiny_config.latent_h, tiny_config.latent_w)
        unet, mode = self._sparse_mode(tiny_config, store, t, mask)
        delta = unet.forward(prev, t, text, mode)
        stepped = prev - _step_scale(tiny_config) * delta
        assert np.array_equal(stepped, store.get((t, 0, Role.STEP_LATENT)))

    def test_sparse_macs_smaller_than_dense(self, tiny_config, tiny_generation):
        store, _ = tiny_generation
        t = tiny_config.steps
        prev = store.get((t - 1, 0, Role.STEP_LATENT))
        text = embed_tokens(PromptTokens(NEW_IDS), tiny_config)
        mask = centered_square_mask(tiny_config.latent_h, tiny_config.latent_w, 0.05)
        macs = _MacsCounter()
        unet, mode = self._sparse_mode(tiny_config, store, t, mask, macs=macs)
        unet.forward(prev, t, text, mode)
        dense_total = sum(unet.dense_step_macs(len(NEW_IDS)).values())
        assert 0 < macs.total < dense_total / 4


class TestDetectMask:
    def test_user_mask_skips_detection(self, tiny_config, tiny_generation):
        store, _ = tiny_generation
        mask = centered_square_mask(32, 32, 0.1)
        session = EditSession.create(OLD_IDS, NEW_IDS, tiny_config, store, user_mask=mask)
        outcome = detect_mask(session, tiny_config, store)
        assert outcome.from_user_mask
        assert outcome.mask == mask
        assert outcome.phase1_macs.total == 0

    def test_identical_prompts_no_edit(self, tiny_config, tiny_generation):
        store, _ = tiny_generation
        session = EditSession.create(OLD_IDS, OLD_IDS, tiny_config, store)
        outcome = detect_mask(session, tiny_config, store)
        assert outcome.no_edit

    def test_injected_patch_recovered_exactly(self, tiny_config):
        store, _ = fresh_generation(tiny_config)
        t1, t2 = tiny_config.t1, tiny_config.t2
        patch = (slice(12, 20), slice(8, 16))
        for t in range(t1, t2 + 1):
            latent = store.get((t, 0, Role.STEP_LATENT)).copy()
            latent[:, :, patch[0], patch[1]] += 0.2
            store.put((t, 0, Role.STEP_LATENT), latent, overwrite=True)
        session = EditSession.create(OLD_IDS, OLD_IDS, tiny_config, store)
        outcome = detect_mask(session, tiny_config, store)
        assert not outcome.no_edit
        want = np.zeros((32, 32), dtype=bool)
        want[11:21, 7:17] = True  # patch plus one-pixel dilation rim
        assert np.array_equal(outcome.mask.bits, want)
        store.close()


class TestEdit:
    def test_identical_prompts_return_cached_bit_exact(self, tiny_config):
        store, final = fresh_generation(tiny_config)
        session = EditSession.create(OLD_IDS, OLD_IDS, tiny_config, store)
        result = edit(session, tiny_config, store)
        assert result.no_edit
        assert np.array_equal(result.latent, final)
        assert result.phase2_macs == 0
        store.close()

    def test_full_user_mask_matches_dense_regeneration(self, tiny_config):
        store, _ = fresh_generation(tiny_config)
        mask = BinaryMask.full(tiny_config.latent_h, tiny_config.latent_w)
        session = EditSession.create(OLD_IDS, NEW_IDS, tiny_config, store, user_mask=mask)
        result = edit(session, tiny_config, store)
        dense = generate_dense(PromptTokens(NEW_IDS), tiny_config)
        assert np.abs(result.latent - dense).max() <= 1e-3
        store.close()

    def test_partial_user_mask_outside_identity(self, tiny_config):
        store, final = fresh_generation(tiny_config)
        mask = centered_square_mask(tiny_config.latent_h, tiny_config.latent_w, 0.1)
        session = EditSession.create(OLD_IDS, NEW_IDS, tiny_config, store, user_mask=mask)
        result = edit(session, tiny_config, store)
        outside = ~mask.bits
        assert np.array_equal(result.latent[:, :, outside], final[:, :, outside])
        assert not np.array_equal(result.latent[:, :, mask.bits], final[:, :, mask.bits])
        store.close()

    def test_detected_mask_outside_identity(self, tiny_config):
        store, final = fresh_generation(tiny_config)
        session = EditSession.create(OLD_IDS, NEW_IDS, tiny_config, store)
        result = edit(session, tiny_config, store)
        assert not result.no_edit
        outside = ~result.mask.bits
        assert np.array_equal(result.latent[:, :, outside], final[:, :, outside])
        store.close()

    def test_empty_user_mask_counts_as_no_edit(self, tiny_config):
        store, final = fresh_generation(tiny_config)
        mask = BinaryMask.empty(tiny_config.latent_h, tiny_config.latent_w)
        session = EditSession.create(OLD_IDS, NEW_IDS, tiny_config, store, user_mask=mask)
        result = edit(session, tiny_config, store)
        assert result.no_edit
        assert np.array_equal(result.latent, final)
        store.close()

    def test_edit_deterministic(self, tiny_config):
        results = []
        for _ in range(2):
            store, _ = fresh_generation(tiny_config)
            mask = centered_square_mask(32, 32, 0.08)
            session = EditSession.create(OLD_IDS, NEW_IDS, tiny_config, store, user_mask=mask)
            results.append(edit(session, tiny_config, store).latent)
            store.close()
        assert np.array_equal(results[0], results[1])

    def test_budget_invariance(self, tiny_config):
        latents = []
        for budget in (None, 250_000):
            store, _ = fresh_generation(tiny_config, hot_budget=budget)
            mask = centered_square_mask(32, 32, 0.08)
            session = EditSession.create(OLD_IDS, NEW_IDS, tiny_config, store, user_mask=mask)
            latents.append(edit(session, tiny_config, store).latent)
            store.close()
        assert np.array_equal(latents[0], latents[1])

    def test_incomplete_cache_fails_before_sparse_phase(self, tiny_config):
        store, _ = fresh_generation(tiny_config)
        unet = UNet(tiny_config)
        victim = next(i for i in unet.layers if i.gated and i.kind == "conv")
        key = (tiny_config.steps, victim.layer_id, Role.LAYER_OUTPUT)
        # drop one required entry: rebuild a store without it
        pruned = CacheStore(async_transfer=False)
        for k in store.keys():
            if k != key:
                pruned.put(k, store.get(k))
        mask = centered_square_mask(32, 32, 0.08)
        session = EditSession.create(OLD_IDS, NEW_IDS, tiny_config, pruned, user_mask=mask)
        with pytest.raises(CacheMissError, match=f"layer={victim.layer_id}"):
            edit(session, tiny_config, pruned)
        store.close()
        pruned.close()

    def test_macs_report_consistency(self, tiny_config):
        store, _ = fresh_generation(tiny_config)
        mask = centered_square_mask(32, 32, 0.05)
        session = EditSession.create(OLD_IDS, NEW_IDS, tiny_config, store, user_mask=mask)
        result = edit(session, tiny_config, store)
        unet = UNet(tiny_config)
        pyramid = build_pyramid(mask, tiny_config.levels)
        plans = {
            level: select_gather_plan(pyramid.levels[level], (3, 3))
            for level in sorted({i.level for i in unet.layers if i.gated})
        }
        dense_step = unet.dense_step_macs(len(NEW_IDS))
        want_conv = 0
        for layer in result.macs.layers:
            if layer.kind != "conv":
                continue
            info = unet.info(layer.layer_id)
            w = 9 * _conv_channels(unet, info)
            if info.gated:
                want_conv += plans[info.level].cost * w * tiny_config.steps
            else:
                want_conv += dense_step[info.layer_id] * tiny_config.steps
        got_conv = sum(l.sparse_macs for l in result.macs.layers if l.kind == "conv")
        assert got_conv == want_conv
        store.close()


def _conv_channels(unet, info):
    convs = [unet.stem, *unet.down, unet.out_conv, *unet.fuse.values()]
    for blocks in (*unet.enc_blocks, *unet.dec_blocks.values()):
        for block in blocks:
            convs.append(block["conv"])
    for layer in convs:
        if layer.info.layer_id == info.layer_id:
            return layer.weights.c_in * layer.weights.c_out
    raise AssertionError(f"no conv layer {info.layer_id}")
