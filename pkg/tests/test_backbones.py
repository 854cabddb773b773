import copy
import math

import pytest
import torch

from conftest import branch_from, micro_components, micro_config, rand_image
from evseg.backbones import (
    ImplicitTextProjector,
    TextEncoder,
    embed_classes,
    load_class_names,
    load_templates,
    sine_position_embedding,
)
from evseg.errors import ConfigError, InvalidArgumentError, InvalidInputError


class TestImageEncoder:
    def test_deterministic(self, micro):
        x = rand_image(8, 8, seed=1)
        a, _ = micro["encoder"](x)
        b, _ = micro["encoder"](x.clone())
        assert torch.equal(a, b)

    def test_all_zero_image_finite(self, micro):
        emb, fmap = micro["encoder"](torch.zeros(1, 1, 8, 8, dtype=torch.float64))
        assert torch.isfinite(emb).all() and torch.isfinite(fmap).all()

    def test_one_pixel_difference_moves_embedding(self, micro):
        a = rand_image(8, 8, seed=2)
        b = a.clone()
        b[0, 0, 4, 4] += 0.25
        ea, _ = micro["encoder"](a)
        eb, _ = micro["encoder"](b)
        assert not torch.equal(ea, eb)

    def test_non_finite_pixels_rejected(self, micro):
        x = rand_image(8, 8, seed=3)
        x[0, 0, 0, 0] = float("nan")
        with pytest.raises(InvalidInputError):
            micro["encoder"](x)

    def test_embedding_width(self, micro):
        emb, fmap = micro["encoder"](rand_image(8, 8, seed=4))
        assert emb.shape == (1, 8)
        assert fmap.shape[1] == 8


class TestTextEncoder:
    def test_deterministic_across_instances(self):
        a = micro_components(seed=0)["text"]
        b = micro_components(seed=0)["text"]
        ea = a.encode(["a photo of a cat"])
        eb = b.encode(["a photo of a cat"])
        assert torch.equal(ea, eb)

    def test_unit_norm_rows(self, micro):
        rows = micro["text"].encode(["street scene", "quiet lane with trees"])
        assert torch.allclose(rows.norm(dim=1), torch.ones(2, dtype=rows.dtype), atol=1e-6)

    def test_tokenization_is_case_insensitive(self, micro):
        enc = micro["text"]
        assert torch.equal(enc.encode(["A Photo"]), enc.encode(["a photo"]))

    def test_empty_prompt_rejected(self, micro):
        with pytest.raises(InvalidArgumentError):
            micro["text"].encode([""])


class TestEmbedClasses:
    def test_single_class_single_template(self, micro):
        enc = micro["text"]
        direct = enc.encode(["a photo of a car"])
        table = embed_classes(enc, ["car"], ["a photo of a {}"])
        assert torch.allclose(table, direct, atol=1e-12)

    def test_duplicate_templates_idempotent(self, micro):
        enc = micro["text"]
        one = embed_classes(enc, ["car", "road"], ["a photo of a {}"])
        two = embed_classes(enc, ["car", "road"], ["a photo of a {}"] * 3)
        assert torch.allclose(one, two, atol=1e-12)

    def test_rows_unit_norm(self, micro):
        table = embed_classes(micro["text"], ["car", "road", "sky"],
                              ["a photo of a {}", "an image of a {}"])
        assert torch.allclose(table.norm(dim=1), torch.ones(3, dtype=table.dtype), atol=1e-6)

    def test_empty_vocabulary_rejected(self, micro):
        with pytest.raises(InvalidArgumentError):
            embed_classes(micro["text"], [], ["a {}"])

    def test_template_without_placeholder(self, micro):
        with pytest.raises(ConfigError):
            embed_classes(micro["text"], ["car"], ["a photo of a thing"])


class TestProjector:
    def test_zero_init_zero_input_gives_identical_rows(self):
        proj = ImplicitTextProjector(micro_config())
        with torch.no_grad():
            for p in proj.parameters():
                p.zero_()
        tokens = proj(torch.zeros(1, 8, dtype=torch.float64))
        assert tokens.shape == (1, 2, 4)
        assert torch.all(tokens == tokens[0, 0])

    def test_dimension_mismatch(self, micro):
        with pytest.raises(InvalidArgumentError):
            micro["projector"](torch.zeros(1, 5, dtype=torch.float64))

    def test_identical_parameters_identical_tokens(self, micro):
        other = copy.deepcopy(micro["projector"])
        emb = torch.randn(2, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        assert torch.equal(micro["projector"](emb), other(emb))

    def test_gradient_matches_central_differences(self, micro):
        proj = micro["projector"]
        for p in proj.parameters():
            p.requires_grad_(True)
        emb = torch.randn(1, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        loss = proj(emb).sum()
        grads = torch.autograd.grad(loss, proj.fc1.weight)
        g = grads[0]
        h = 1e-6
        for idx in [(0, 0), (3, 5), (7, 2)]:
            with torch.no_grad():
                proj.fc1.weight[idx] += h
                up = float(proj(emb).sum())
                proj.fc1.weight[idx] -= 2 * h
                down = float(proj(emb).sum())
                proj.fc1.weight[idx] += h
            fd = (up - down) / (2 * h)
            assert abs(fd - float(g[idx])) <= 1e-4 * max(abs(fd), 1e-8)

    def test_token_normalization_flag(self):
        comps = micro_components(seed=3, normalize_tokens=True)
        emb = torch.randn(2, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
        tokens = comps["projector"](emb)
        assert torch.allclose(tokens.norm(dim=2), torch.ones(2, 2, dtype=tokens.dtype), atol=1e-9)


class TestFeatureExtractor:
    def test_deterministic(self, micro):
        x = rand_image(8, 8, seed=5)
        tokens = torch.randn(1, 2, 4, dtype=torch.float64,
                             generator=torch.Generator().manual_seed(3))
        assert torch.equal(micro["features"](x, tokens), micro["features"](x, tokens.clone()))

    def test_tokens_condition_the_features(self, micro):
        x = rand_image(8, 8, seed=6)
        zeros = torch.zeros(1, 2, 4, dtype=torch.float64)
        ones = torch.ones(1, 2, 4, dtype=torch.float64)
        assert not torch.equal(micro["features"](x, zeros), micro["features"](x, ones))

    def test_output_quarter_resolution(self):
        comps = micro_components(seed=1)
        for h, w, eh, ew in [(8, 8, 2, 2), (64, 64, 16, 16), (10, 6, 3, 2)]:
            x = rand_image(h, w, seed=7)
            tokens = torch.zeros(1, 2, 4, dtype=torch.float64)
            f = comps["features"](x, tokens)
            assert f.shape == (1, 8, eh, ew), (h, w)

    def test_shape_mismatch(self, micro):
        x = rand_image(8, 8, seed=8)
        with pytest.raises(InvalidArgumentError):
            micro["features"](x, torch.zeros(1, 3, 4, dtype=torch.float64))


class TestMaskGenerator:
    def test_shape_contract(self, micro):
        f = torch.randn(1, 8, 2, 2, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(4))
        ms = micro["masks"](f, (8, 8))
        assert ms.mask_logits.shape == (1, 3, 8, 8)
        assert ms.mask_embeddings.shape == (1, 3, 4)
        assert len(ms.decoder_trace) == 2
        assert all(t.shape == (1, 3, 8) for t in ms.decoder_trace)

    def test_identical_parameters_identical_masksets(self, micro):
        other = copy.deepcopy(micro["masks"])
        f = torch.randn(1, 8, 2, 2, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(5))
        a = micro["masks"](f, (8, 8))
        b = other(f, (8, 8))
        assert torch.equal(a.mask_logits, b.mask_logits)
        assert torch.equal(a.mask_embeddings, b.mask_embeddings)
        assert all(torch.equal(x, y) for x, y in zip(a.decoder_trace, b.decoder_trace))

    def test_trace_finite_for_random_features(self, micro):
        f = torch.randn(2, 8, 4, 4, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(6))
        ms = micro["masks"](f, (16, 16))
        assert all(torch.isfinite(t).all() for t in ms.decoder_trace)

    def test_channel_mismatch(self, micro):
        with pytest.raises(InvalidArgumentError):
            micro["masks"](torch.zeros(1, 5, 2, 2, dtype=torch.float64), (8, 8))


class TestBranchCloneProperty:
    def test_clone_matches_end_to_end(self, micro):
        from evseg.branches import clone_branch
        branch = branch_from(micro)
        other = clone_branch(branch)
        other.set_trainable(("projector", "masks"))
        x = rand_image(8, 8, batch=2, seed=9)
        a = branch.forward(x)
        b = other.forward(x)
        assert torch.equal(a.tokens, b.tokens.detach())
        assert torch.equal(a.features, b.features.detach())
        assert torch.equal(a.masks.mask_logits, b.masks.mask_logits.detach())
        assert torch.equal(a.masks.mask_embeddings, b.masks.mask_embeddings.detach())
        for ta, tb in zip(a.masks.decoder_trace, b.masks.decoder_trace):
            assert torch.equal(ta, tb.detach())


def test_sine_positions_are_deterministic_and_distinct():
    a = sine_position_embedding(3, 4, 8, torch.float64)
    b = sine_position_embedding(3, 4, 8, torch.float64)
    assert torch.equal(a, b)
    assert a.shape == (12, 8)
    assert not torch.equal(a[0], a[1])


def test_prompt_and_class_file_loaders(tmp_path):
    classes = tmp_path / "classes.txt"
    classes.write_text("road\nsky\n\n")
    assert load_class_names(classes) == ["road", "sky"]
    empty = tmp_path / "empty.txt"
    empty.write_text("\n")
    with pytest.raises(ConfigError):
        load_class_names(empty)
    prompts = tmp_path / "prompts.txt"
    prompts.write_text("a photo of a {}\na grainy photo of a {}\n")
    assert len(load_templates(prompts)) == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("no placeholder here\n")
    with pytest.raises(ConfigError):
        load_templates(bad)
