import math

import pytest
import torch

from conftest import random_ids, random_model
from satnmt import tensor_core as tc
from satnmt.data import Checkpoint
from satnmt.errors import ConfigMismatch, InvalidArgument
from satnmt.masks import relaxed_causal_mask, strict_causal_mask
from satnmt.model import (BOS, PAD, HyperParams, ModelParams, SATModel, canonical_names,
                          init_from_teacher, init_params, param_count, param_shapes,
                          positional_table, teacher_copied_names)


def reference_transformer_logits(model: SATModel, src, tgt):
    """Word-by-word decoder written out directly: one-step shift, lower-triangular mask."""
    hp, p = model.hp, model.params
    enc, src_mask = model.encode(src)
    dec_in = torch.cat([torch.full((tgt.shape[0], 1), BOS), tgt[:, :-1]], dim=1)
    n = tgt.shape[1]
    causal = torch.tril(torch.ones(n, n, dtype=torch.bool))
    x = p["tgt_embed"][dec_in] * math.sqrt(hp.d_model) + positional_table(n, hp.d_model,
                                                                          p.dtype)

    def attn(q, kv, mask, pre):
        return tc.multi_head_attention(q, kv, mask, p[f"{pre}.wq"], p[f"{pre}.wk"],
                                       p[f"{pre}.wv"], p[f"{pre}.wo"], hp.h)

    def ln(y, pre):
        return tc.layer_norm(y, p[f"{pre}.gain"], p[f"{pre}.bias"])

    for i in range(hp.N):
        b = f"dec.{i}"
        x = ln(x + attn(x, x, causal, f"{b}.self_attn"), f"{b}.ln1")
        x = ln(x + attn(x, enc, src_mask[:, None, :], f"{b}.cross_attn"), f"{b}.ln2")
        f = tc.ffn(x, p[f"{b}.ffn.w1"], p[f"{b}.ffn.b1"], p[f"{b}.ffn.w2"], p[f"{b}.ffn.b2"])
        x = ln(x + f, f"{b}.ln3")
    return x @ p["out_proj"].T


def test_k1_equals_reference_transformer():
    for seed in range(10):
        model = random_model(seed, N=2)
        g = torch.Generator().manual_seed(seed)
        src, tgt = random_ids(g, 3, 5, 11), random_ids(g, 3, 7, 11)
        assert torch.equal(model.teacher_forced_logits(src, tgt),
                           reference_transformer_logits(model, src, tgt))


def test_encode_shapes_and_errors(tiny_model):
    states, mask = tiny_model.encode(torch.tensor([[5, 6, 7, 2]]))
    assert states.shape == (1, 4, 8) and mask.all()
    with pytest.raises(InvalidArgument):
        tiny_model.encode(torch.zeros(1, 0, dtype=torch.long))
    with pytest.raises(InvalidArgument):
        tiny_model.encode(torch.tensor([[5, 99]]))


def test_pad_positions_do_not_leak(tiny_model):
    src = torch.tensor([[5, 6, 7, 2, PAD, PAD], [4, 4, 5, 6, 8, 2]])
    before, _ = tiny_model.encode(src)
    with torch.no_grad():
        tiny_model.params["src_embed"][PAD] += 3.0
    after, _ = tiny_model.encode(src)
    assert torch.equal(before[0, :4], after[0, :4])
    assert torch.equal(before[1], after[1])
    alone, _ = tiny_model.encode(src[:1, :4])
    assert torch.allclose(alone[0], after[0, :4], atol=1e-5)


def test_encode_deterministic_for_identical_rows(tiny_model):
    src = torch.tensor([[5, 6, 7, 2], [5, 6, 7, 2]])
    states, _ = tiny_model.encode(src)
    assert torch.equal(states[0], states[1])
    again, _ = tiny_model.encode(src)
    assert torch.equal(states, again)


def test_decoder_shape_and_mask_size(tiny_model):
    enc, sm = tiny_model.encode(torch.tensor([[5, 6, 2]]))
    logits = tiny_model.decoder_forward(torch.tensor([[1, 5, 6, 7]]), enc, sm,
                                        relaxed_causal_mask(4, 2))
    assert logits.shape == (1, 4, 11)
    with pytest.raises(InvalidArgument):
        tiny_model.decoder_forward(torch.tensor([[1, 5, 6]]), enc, sm, strict_causal_mask(4))


@pytest.mark.parametrize("K", [1, 2, 3, 4, 6])
def test_no_leakage_from_later_groups(K):
    for draw in range(12):
        model = random_model(draw, K=K)
        g = torch.Generator().manual_seed(100 + draw)
        n = int(torch.randint(2, 13, (1,), generator=g))
        enc, sm = model.encode(random_ids(g, 2, 5, 11))
        dec = random_ids(g, 2, n, 11)
        mask = relaxed_causal_mask(n, K)
        base = model.decoder_forward(dec, enc, sm, mask)
        for grp in range(1, (n - 1) // K + 1):
            cut = grp * K
            pert = dec.clone()
            pert[:, cut:] = random_ids(g, 2, n - cut, 11)
            out = model.decoder_forward(pert, enc, sm, mask)
            assert torch.equal(out[:, :cut], base[:, :cut])


def test_later_positions_do_see_their_group():
    model = random_model(3, K=3)
    g = torch.Generator().manual_seed(0)
    enc, sm = model.encode(random_ids(g, 1, 4, 11))
    dec = torch.tensor([[1, 1, 1, 5, 6, 7]])
    mask = relaxed_causal_mask(6, 3)
    base = model.decoder_forward(dec, enc, sm, mask)
    pert = dec.clone()
    pert[0, 5] = 9  # last slot of group 1 is visible to the whole group
    out = model.decoder_forward(pert, enc, sm, mask)
    assert torch.equal(out[:, :3], base[:, :3])
    assert not torch.equal(out[:, 3], base[:, 3])


@pytest.mark.parametrize("sharing", ["shared-all", "shared-target-only", "none"])
@pytest.mark.parametrize("dims", [(8, 1, 2, 16), (16, 3, 4, 24)])
def test_param_count_closed_form(sharing, dims):
    d, N, h, f = dims
    V = 13
    hp = HyperParams(V, V, d_model=d, N=N, h=h, d_ff=f, sharing=sharing)
    params = init_params(hp)
    assert sum(t.numel() for t in params.unique().values()) == param_count(hp)
    assert set(params) == set(param_shapes(hp))
    assert list(params.unique()) == canonical_names(hp)


def test_weight_sharing_aliases():
    hp = HyperParams(9, 9, d_model=8, h=2, sharing="shared-all")
    p = init_params(hp)
    with torch.no_grad():
        p["tgt_embed"][4, 0] = 123.0
    assert p["src_embed"][4, 0] == 123.0 and p["out_proj"][4, 0] == 123.0
    hp2 = HyperParams(9, 12, d_model=8, h=2, sharing="shared-target-only")
    p2 = init_params(hp2)
    assert p2["tgt_embed"] is p2["out_proj"] and p2["src_embed"] is not p2["tgt_embed"]
    clone = p2.clone()
    assert clone["tgt_embed"] is clone["out_proj"]


def test_init_params_layout():
    hp = HyperParams(9, 9, d_model=8, h=2)
    p = init_params(hp)
    assert torch.all(p["enc.0.ln1.gain"] == 1) and torch.all(p["enc.0.ffn.b1"] == 0)
    assert float(p["dec.0.ffn.w1"].abs().max()) <= 0.04
    assert torch.equal(init_params(hp)["dec.1.ffn.w1"], p["dec.1.ffn.w1"])


def test_hyperparam_validation():
    with pytest.raises(InvalidArgument):
        HyperParams(9, 9, d_model=10, h=4)
    with pytest.raises(InvalidArgument):
        HyperParams(9, 9, K=0)
    with pytest.raises(InvalidArgument):
        HyperParams(9, 9, dropout=1.0)
    with pytest.raises(InvalidArgument):
        HyperParams(9, 10, sharing="shared-all")


def test_init_from_teacher_copies_listed_tensors():
    teacher_model = random_model(1, K=1, N=2)
    teacher = Checkpoint(teacher_model.hp, teacher_model.params, step=100)
    student_hp = teacher_model.hp.replace(K=2, seed=7)
    student = init_from_teacher(teacher, student_hp)
    copied = teacher_copied_names(student_hp)
    assert {"src_embed", "tgt_embed", "out_proj", "enc.0.self_attn.wq"} <= copied
    assert not any(n.startswith("dec.") for n in copied)
    for name in student:
        if name in copied:
            assert torch.equal(student[name], teacher.params[name])
        elif student[name].dim() == 2:
            assert not torch.equal(student[name], teacher.params[name])
    again = init_from_teacher(teacher, student_hp)
    assert all(torch.equal(again[n], student[n]) for n in student)
    assert student["tgt_embed"] is student["out_proj"]
    assert student["src_embed"] is not teacher.params["src_embed"]


def test_init_from_teacher_mismatch():
    teacher_model = random_model(1)
    teacher = Checkpoint(teacher_model.hp, teacher_model.params)
    with pytest.raises(ConfigMismatch):
        init_from_teacher(teacher, teacher_model.hp.replace(d_ff=32))
    hp_none = teacher_model.hp.replace(sharing="none")
    untied = init_params(hp_none)
    with pytest.raises(ConfigMismatch):
        init_from_teacher(Checkpoint(hp_none, untied), teacher_model.hp)


def test_model_params_dtype_conversion_keeps_aliases():
    p = init_params(HyperParams(9, 9, d_model=8, h=2)).to(torch.float64)
    assert p.dtype == torch.float64 and p["src_embed"] is p["out_proj"]
    assert isinstance(p, ModelParams)
