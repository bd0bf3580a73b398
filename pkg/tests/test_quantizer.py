import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from uwspeech.nncore import gradient_check
from uwspeech.quantizer import (BLANK_LABEL, Codebook, TokenSequence, bridge_gradient, default_labels,
                                embed, load_labels, quantize, quantize_indices, straight_through,
                                token_scores, write_labels)


def basis_codebook(n=4):
    cb = Codebook([f"p{i}" for i in range(n)], dim=n)
    with torch.no_grad():
        cb.embeddings.zero_()
        cb.embeddings[:n] = torch.eye(n)
    return cb


def brute_force_tokens(hidden, rows):
    out = []
    for h in hidden:
        best, best_k = None, None
        for k, row in enumerate(rows):
            s = float(np.dot(h, row))
            if best is None or s > best:
                best, best_k = s, k
        out.append(best_k)
    return out


def test_default_labels():
    labels = default_labels()
    assert len(labels) == 177
    assert len(set(labels)) == 177
    assert BLANK_LABEL not in labels
    cb = Codebook()
    assert cb.embeddings.shape == (178, 256)
    assert cb.blank_index == 177 == cb.num_tokens
    assert float(cb.embeddings.detach().abs().max()) <= 0.1


def test_label_file_roundtrip(tmp_path):
    path = tmp_path / "labels.txt"
    write_labels(path, ["a", "b", "ʃ"])
    assert path.read_text(encoding="utf-8").splitlines() == ["a", "b", "ʃ", BLANK_LABEL]
    assert load_labels(path) == ["a", "b", "ʃ"]


def test_label_file_errors(tmp_path):
    path = tmp_path / "labels.txt"
    path.write_text("a\nb\n", encoding="utf-8")
    with pytest.raises(ValueError):
        load_labels(path)
    path.write_text("a\na\n<blank>\n", encoding="utf-8")
    with pytest.raises(ValueError):
        load_labels(path)


def test_encode_decode():
    cb = Codebook(["a", "b", "c"], dim=4)
    assert cb.encode(["c", "a"]) == [2, 0]
    assert cb.decode([1, 2]) == ["b", "c"]
    with pytest.raises(ValueError, match="unknown"):
        cb.encode(["z"])


def test_basis_vector():
    cb = basis_codebook()
    assert quantize(torch.eye(4)[2:3], cb).tokens == [2]


def test_positive_scaling_invariance():
    torch.manual_seed(0)
    cb = Codebook(dim=16)
    h = torch.randn(30, 16)
    assert quantize(3.0 * h, cb).tokens == quantize(h, cb).tokens


def test_brute_force_default_size():
    torch.manual_seed(1)
    cb = Codebook(dim=256)
    h = torch.randn(50, 256)
    rows = cb.embeddings.detach().numpy()[:177]
    assert quantize(h, cb).tokens == brute_force_tokens(h.numpy(), rows)


def test_lowest_index_wins_ties():
    cb = Codebook(["a", "b", "c", "d"], dim=2)
    with torch.no_grad():
        cb.embeddings[:] = torch.tensor([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    assert quantize(torch.tensor([[2.0, 0.0]]), cb).tokens == [1]
    with torch.no_grad():
        cb.embeddings[0] = torch.tensor([1.0, 0.0])
    assert quantize(torch.tensor([[2.0, 0.0]]), cb).tokens == [0]


def test_blank_never_emitted():
    cb = Codebook(["a", "b"], dim=3)
    with torch.no_grad():
        cb.embeddings[2] = torch.tensor([100.0, 100.0, 100.0])
    h = torch.randn(200, 3).abs()
    assert cb.blank_index not in quantize(h, cb).tokens
    assert token_scores(h, cb).argmax(-1).eq(2).all()  # the blank would have won


def test_dimension_mismatch():
    cb = Codebook(["a"], dim=4)
    with pytest.raises(ValueError, match="codebook dim"):
        quantize(torch.zeros(2, 3), cb)


def test_embed_rows():
    cb = basis_codebook()
    assert torch.equal(embed([3, 0], cb), torch.eye(4)[[3, 0]])
    assert torch.equal(embed(TokenSequence([1]), cb), torch.eye(4)[[1]])


def test_embed_empty():
    cb = Codebook(["a", "b"], dim=5)
    out = embed([], cb)
    assert out.shape == (0, 5)


def test_embed_rejects_out_of_range():
    cb = Codebook(["a", "b"], dim=5)
    with pytest.raises(ValueError):
        embed([2], cb)  # the blank row is not a valid embed target
    with pytest.raises(ValueError):
        embed([-1], cb)


def test_quantize_then_embed_orthonormal():
    cb = basis_codebook()
    h = torch.tensor([[0.2, 0.9, 0.1, 0.0], [0.0, 0.0, -1.0, 0.5]])
    z = quantize(h, cb)
    assert torch.equal(embed(z, cb), torch.eye(4)[[1, 3]])


def test_codewords_are_fixed_points():
    torch.manual_seed(2)
    cb = Codebook(["a", "b", "c", "d", "e"], dim=8)
    with torch.no_grad():
        rows = torch.nn.functional.normalize(torch.randn(5, 8), dim=1)
        cb.embeddings[:5] = rows
    z = quantize(rows, cb)
    assert z.tokens == [0, 1, 2, 3, 4]
    assert torch.equal(embed(z, cb), rows)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31), scale=st.floats(1e-3, 1e3))
def test_idempotence_equal_norms(seed, scale):
    g = torch.Generator().manual_seed(seed)
    cb = Codebook([str(i) for i in range(12)], dim=6)
    with torch.no_grad():
        cb.embeddings[:12] = torch.nn.functional.normalize(torch.randn(12, 6, generator=g), dim=1) * 2.0
    h = torch.randn(10, 6, generator=g)
    z = quantize(h, cb)
    assert quantize(embed(z, cb), cb).tokens == z.tokens
    assert quantize(scale * h, cb).tokens == z.tokens


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_one_token_per_position(seed):
    g = torch.Generator().manual_seed(seed)
    cb = Codebook([str(i) for i in range(7)], dim=4)
    h = torch.randn(9, 4, generator=g)
    idx = quantize_indices(h, cb)
    assert idx.shape == (9,)
    assert ((idx >= 0) & (idx < 7)).all()


def test_bridge_on_copies_gradient():
    g = torch.randn(3, 4)
    assert torch.equal(bridge_gradient(g, True), g)
    hidden = torch.randn(3, 4, requires_grad=True)
    emb = torch.randn(3, 4, requires_grad=True)
    out = straight_through(hidden, emb, True)
    assert torch.equal(out, emb)
    out.backward(g)
    assert torch.equal(hidden.grad, g)
    assert torch.equal(emb.grad, g)


def test_bridge_off_blocks_gradient():
    g = torch.randn(3, 4)
    assert torch.equal(bridge_gradient(g, False), torch.zeros(3, 4))
    hidden = torch.randn(3, 4, requires_grad=True)
    emb = torch.randn(3, 4, requires_grad=True)
    straight_through(hidden, emb, False).backward(g)
    assert torch.equal(hidden.grad, torch.zeros(3, 4))
    assert torch.equal(emb.grad, g)


def test_codebook_row_gradient_is_sum_of_assigned_rows(float64):
    torch.manual_seed(3)
    cb = Codebook(["a", "b", "c", "d"], dim=5)
    hidden = torch.randn(7, 5)
    target = torch.randn(7, 5)
    tokens = quantize(hidden, cb).tokens

    def l_inv():
        e_z = straight_through(hidden, embed(tokens, cb))
        return ((e_z - target) ** 2).sum()

    e_z = straight_through(hidden, embed(tokens, cb))
    (g_ez,) = torch.autograd.grad(((e_z - target) ** 2).sum(), e_z, retain_graph=True)
    expected = torch.zeros_like(cb.embeddings)
    for i, k in enumerate(tokens):
        expected[k] += g_ez[i]
    (g_e,) = torch.autograd.grad(l_inv(), cb.embeddings)
    assert torch.allclose(g_e, expected)
    report = gradient_check(l_inv, {"e": cb.embeddings})
    assert report.ok(1e-4)


def test_bridge_gradient_fd_suite():
    import gradsuite
    for seed in range(3):
        assert gradsuite.bridge(seed).ok(1e-4)
