import unittest

import torch

from bimamba import ops
from bimamba._exceptions import ConfigError, ShapeError
from bimamba.model import (
    PRESETS,
    BiMambaBlock,
    BiMambaModel,
    ModelConfig,
    assemble_multi_view,
    assemble_single_view,
    bce_loss,
    cls_concat_forward,
    model_forward,
    patchify,
    probability,
    unpatchify,
)

TOY = PRESETS["toy"]


def toy_images(seed: int, batch: int = 2, config: ModelConfig = TOY):
    generator = torch.Generator().manual_seed(seed)
    shape = (batch, config.image_height, config.image_width)
    frontal = torch.rand(shape, generator=generator, dtype=config.torch_dtype)
    lateral = torch.rand(shape, generator=generator, dtype=config.torch_dtype)
    return frontal, lateral


def randomize_out_proj(model: BiMambaModel, seed: int) -> None:
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for block in model.blocks:
            noise = torch.rand(
                block.out_proj.shape,
                generator=generator,
                dtype=block.out_proj.dtype,
            )
            block.out_proj.copy_(noise - 0.5)


class TestStructure(unittest.TestCase):
    def test_sequence_lengths(self):
        for patch in (8, 16):
            for size in (64, 128, 512):
                j = (size // patch) ** 2
                with self.subTest(msg=f"P={patch}, H={size}"):
                    single = ModelConfig(
                        patch_size=patch,
                        image_height=size,
                        image_width=size,
                        views="single",
                    )
                    multi = single.replace(views="multi")
                    self.assertEqual(single.n_patches, j)
                    self.assertEqual(single.seq_len, j + 1)
                    self.assertEqual(single.cls_index, j // 2)
                    self.assertEqual(multi.seq_len, 2 * j + 1)
                    self.assertEqual(multi.cls_index, j)

    def test_full_size_multi_view_length(self):
        self.assertEqual(PRESETS["paper"].seq_len, 2049)
        self.assertEqual(PRESETS["paper"].cls_index, 1024)

    def test_cls_token_concat_uses_single_view_length(self):
        config = TOY.replace(fusion="cls_token_concat")
        self.assertEqual(config.seq_len, config.n_patches + 1)
        self.assertEqual(config.mode, "cls_token_concat")

    def test_modes(self):
        self.assertEqual(TOY.mode, "input_patch_concat")
        self.assertEqual(
            TOY.replace(views="single", single_view="lateral").mode,
            "single_lateral",
        )

    def test_patchify_order(self):
        image = torch.arange(16.0).reshape(4, 4)
        patches = patchify(image, 2)
        self.assertEqual(patches.shape, (4, 4))
        self.assertEqual(patches[0].tolist(), [0.0, 1.0, 4.0, 5.0])
        self.assertEqual(patches[1].tolist(), [2.0, 3.0, 6.0, 7.0])
        self.assertEqual(patches[2].tolist(), [8.0, 9.0, 12.0, 13.0])
        self.assertTrue(torch.equal(unpatchify(patches, 2, 4), image))
        with self.assertRaises(ShapeError):
            patchify(torch.zeros(5, 4), 2)

    def test_assembly_places_cls(self):
        j, d = 4, 3
        u = torch.zeros(2, j, d)
        v = torch.ones(2, j, d)
        cls = torch.full((d,), 7.0)
        single = assemble_single_view(u, cls, torch.zeros(j + 1, d))
        self.assertEqual(single.cls_index, 2)
        self.assertTrue(bool((single.tokens[:, 2] == 7.0).all()))
        self.assertTrue(bool((single.tokens[:, [0, 1, 3, 4]] == 0.0).all()))

        pos = torch.arange(2 * j + 1.0)[:, None].expand(2 * j + 1, d)
        multi = assemble_multi_view(u, v, cls, pos)
        self.assertEqual(multi.cls_index, j)
        self.assertEqual(multi.tokens.shape, (2, 2 * j + 1, d))
        torch.testing.assert_close(multi.tokens[0, j], cls + j)
        torch.testing.assert_close(multi.tokens[0, j + 1], v[0, 0] + j + 1)
        with self.assertRaises(ShapeError):
            assemble_multi_view(u, v, cls, pos[:-1])
        with self.assertRaises(ShapeError):
            assemble_multi_view(u, v[:, :3], cls, pos)


class TestConfig(unittest.TestCase):
    def test_invalid_values(self):
        cases = {
            "views": dict(views="triple"),
            "fusion": dict(fusion="late"),
            "divisibility": dict(image_height=60),
            "width": dict(d_inner=32, d_model=64),
            "negative chunk": dict(scan_chunk=-1),
            "dtype": dict(dtype="float16"),
            "zero blocks": dict(n_blocks=0),
        }
        for name, kwargs in cases.items():
            with self.subTest(msg=name), self.assertRaises(ConfigError):
                ModelConfig(**kwargs)

    def test_items_round_trip(self):
        config = TOY.replace(residual_mode="literal_paper", norm="layer")
        items = dict(config.to_items())
        self.assertEqual(ModelConfig.from_items(items), config)

    def test_from_items_rejects(self):
        with self.assertRaises(ConfigError):
            ModelConfig.from_items({"depth": "3"})
        with self.assertRaises(ConfigError):
            ModelConfig.from_items({"n_blocks": "three"})

    def test_default_dt_rank(self):
        self.assertEqual(TOY.resolved_dt_rank, 1)
        self.assertEqual(PRESETS["paper"].resolved_dt_rank, 24)
        self.assertEqual(TOY.replace(dt_rank=3).resolved_dt_rank, 3)


class TestResidualModes(unittest.TestCase):
    def test_single_mode_is_identity_with_zero_projection(self):
        model = BiMambaModel(TOY, seed=0)
        tokens = ops.create((2, TOY.seq_len, TOY.d_model), "normal", seed=1)
        with torch.no_grad():
            torch.testing.assert_close(model.encode(tokens), tokens)

    def test_literal_mode_doubles_per_block(self):
        for n_blocks in (1, 2, 3):
            config = TOY.replace(
                n_blocks=n_blocks, residual_mode="literal_paper"
            )
            model = BiMambaModel(config, seed=0)
            tokens = ops.create(
                (config.seq_len, config.d_model), "normal", seed=2
            )
            with self.subTest(msg=f"M={n_blocks}"), torch.no_grad():
                torch.testing.assert_close(
                    model.encode(tokens), tokens * 2**n_blocks
                )

    def test_disable_backward_branch(self):
        model = BiMambaModel(TOY, seed=3)
        randomize_out_proj(model, 4)
        frontal, lateral = toy_images(5)
        with torch.no_grad():
            both = model(frontal, lateral)
            model.disable_backward_branch = True
            forward_only = model(frontal, lateral)
        self.assertFalse(torch.allclose(both, forward_only))

    def test_forward_branch_cannot_see_tokens_after_cls(self):
        # [CLS] sits between the frontal and lateral tokens
        model = BiMambaModel(TOY, seed=20)
        randomize_out_proj(model, 21)
        frontal, lateral = toy_images(22)
        changed = 1.0 - lateral
        with torch.no_grad():
            both = model(frontal, lateral)
            both_changed = model(frontal, changed)
            model.disable_backward_branch = True
            forward_only = model(frontal, lateral)
            forward_only_changed = model(frontal, changed)
        torch.testing.assert_close(forward_only_changed, forward_only)
        self.assertFalse(torch.allclose(both_changed, both))

    def test_block_combines_both_directions(self):
        config = TOY.replace(n_blocks=1)
        block = BiMambaBlock(config)
        block.reset_parameters(torch.Generator().manual_seed(6))
        with torch.no_grad():
            block.out_proj.copy_(torch.eye(16, 8))
            tokens = ops.create((config.seq_len, 8), "normal", seed=7)
            combined = block(tokens)
            forward_only = block(tokens, disable_backward=True)
            normed = block.norm(tokens)
            x = normed @ block.x_proj
            gate = torch.nn.functional.silu(normed @ block.z_proj)
            backward = (block.mix(x, block.backward_ssm) * gate)[:, :8]
        torch.testing.assert_close(combined - forward_only, backward)


class TestModel(unittest.TestCase):
    def test_forward_shapes_and_range(self):
        for name, config in (
            ("multi", TOY),
            ("cls concat", TOY.replace(fusion="cls_token_concat")),
            ("single frontal", TOY.replace(views="single")),
            (
                "single lateral",
                TOY.replace(views="single", single_view="lateral"),
            ),
        ):
            with self.subTest(msg=name):
                model = BiMambaModel(config, seed=0)
                frontal, lateral = toy_images(1, batch=3)
                with torch.no_grad():
                    logits = model(frontal, lateral)
                    probs = model_forward(model, frontal, lateral)
                self.assertEqual(logits.shape, (3,))
                self.assertTrue(bool(((probs > 0) & (probs < 1)).all()))

    def test_unbatched_input(self):
        model = BiMambaModel(TOY, seed=0)
        frontal, lateral = toy_images(2, batch=1)
        with torch.no_grad():
            single = model(frontal[0], lateral[0])
            batched = model(frontal, lateral)
        self.assertEqual(single.shape, ())
        torch.testing.assert_close(single, batched[0])

    def test_seeded_initialization(self):
        a, b = BiMambaModel(TOY, seed=9), BiMambaModel(TOY, seed=9)
        c = BiMambaModel(TOY, seed=10)
        for (name, pa), (_, pb), (_, pc) in zip(
            a.named_parameters(), b.named_parameters(), c.named_parameters()
        ):
            with self.subTest(msg=name):
                self.assertTrue(torch.equal(pa, pb))
        self.assertFalse(torch.equal(a.patch_proj, c.patch_proj))

    def test_batch_elements_are_independent(self):
        model = BiMambaModel(TOY, seed=11)
        randomize_out_proj(model, 12)
        frontal, lateral = toy_images(13, batch=2)
        with torch.no_grad():
            both = model(frontal, lateral)
            changed = frontal.clone()
            changed[1] = 1.0 - changed[1]
            again = model(changed, lateral)
        torch.testing.assert_close(both[0], again[0])

    def test_views_matter(self):
        model = BiMambaModel(TOY, seed=14)
        randomize_out_proj(model, 15)
        frontal, lateral = toy_images(16)
        with torch.no_grad():
            base = model(frontal, lateral)
            swapped = model(frontal, lateral.flip(-1))
        self.assertFalse(torch.allclose(base, swapped))

    def test_errors(self):
        model = BiMambaModel(TOY, seed=0)
        frontal, lateral = toy_images(17)
        with self.assertRaises(ShapeError):
            model(frontal[..., :8], lateral[..., :8])
        with self.assertRaises(ShapeError):
            model(frontal)
        with self.assertRaises(ConfigError):
            cls_concat_forward(model, frontal, lateral)

    def test_cls_concat_forward(self):
        model = BiMambaModel(TOY.replace(fusion="cls_token_concat"), seed=18)
        width = TOY.d_model
        self.assertEqual(model.head_hidden.shape, (2 * width, width))
        frontal, lateral = toy_images(19)
        with torch.no_grad():
            probs = cls_concat_forward(model, frontal, lateral)
        self.assertEqual(probs.shape, (2,))


class TestProbability(unittest.TestCase):
    def test_saturated_logits_stay_inside_unit_interval(self):
        for dtype in (torch.float32, torch.float64):
            logits = torch.tensor(
                [-800.0, -40.0, 0.0, 40.0, 800.0], dtype=dtype
            )
            with self.subTest(dtype=dtype):
                probs = probability(logits)
                self.assertTrue(bool(((probs > 0) & (probs < 1)).all()))
                self.assertEqual(float(probs[2]), 0.5)

    def test_large_head_bias(self):
        model = BiMambaModel(TOY, seed=0)
        with torch.no_grad():
            for param in model.parameters():
                param.zero_()
            model.head_out_bias.fill_(20.0)
            probs = model_forward(model, *toy_images(23))
        self.assertEqual(probs.shape, (2,))
        self.assertTrue(bool(((probs > 0) & (probs < 1)).all()))


class TestLoss(unittest.TestCase):
    def test_matches_torch(self):
        logits = torch.tensor(
            [-40.0, -2.0, 0.0, 3.0, 40.0], dtype=torch.float64
        )
        labels = torch.tensor([0.0, 1.0, 1.0, 0.0, 1.0], dtype=torch.float64)
        expected = torch.nn.functional.binary_cross_entropy_with_logits(
            logits, labels
        )
        torch.testing.assert_close(bce_loss(logits, labels), expected)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            bce_loss(torch.zeros(3), torch.zeros(2))


class TestGradients(unittest.TestCase):
    def test_end_to_end_gradient_check(self):
        for name, config in (
            ("input patch concat", TOY),
            ("literal residual", TOY.replace(residual_mode="literal_paper")),
            ("sequential scan", TOY.replace(scan_mode="sequential")),
        ):
            config = config.replace(dtype="float64")
            with self.subTest(msg=name):
                model = BiMambaModel(config, seed=20)
                randomize_out_proj(model, 21)
                frontal, lateral = toy_images(22, config=config)
                labels = torch.tensor([0.0, 1.0], dtype=torch.float64)

                def loss_fn():
                    return bce_loss(model(frontal, lateral), labels)

                result = ops.gradient_check(
                    loss_fn, list(model.named_parameters()), step=1e-5
                )
                self.assertTrue(result.passed(1e-3), result)

    def test_backward_populates_every_parameter(self):
        model = BiMambaModel(TOY, seed=23)
        randomize_out_proj(model, 24)
        frontal, lateral = toy_images(25)
        loss = bce_loss(model(frontal, lateral), torch.tensor([1.0, 0.0]))
        ops.backward(loss)
        for name, param in model.named_parameters():
            with self.subTest(msg=name):
                self.assertIsNotNone(param.grad)
                self.assertTrue(bool(torch.isfinite(param.grad).all()))
