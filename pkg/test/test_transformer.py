import itertools

import numpy as np
import pytest

from app.core.errors import ConfigurationError, ContractError, TokenIndexError
from app.core.seeding import stream
from app.models.common import Precision
from app.models.config import ModelConfig
from app.services import autodiff as ad
from app.services.autodiff import Tape, Tensor, gradient_error
from app.services.layer_skip import mask_from_indices, zeros_mask
from app.services.transformer import (
    PolicyParams,
    TokenSequence,
    completion_token_logprobs,
    filtered_logprobs,
    forward_logits,
    generate,
    init_params,
    load_checkpoint,
    sample_completion,
    save_checkpoint,
    sequence_logprob,
    transformer_block,
)

PROMPT = np.array([12, 1, 10, 2, 11, 17])


def test_zero_mask_equals_unmasked_forward(tiny_params):
    plain = forward_logits(tiny_params, PROMPT)
    masked = forward_logits(tiny_params, PROMPT, zeros_mask(4))
    np.testing.assert_array_equal(plain.data, masked.data)


def test_skipped_block_is_identity_on_the_residual_stream():
    config = ModelConfig(num_layers=3, width=8, num_heads=2, vocab_size=6, max_sequence_length=8, precision=Precision.FLOAT64)
    params = init_params(config, stream(1, "init"))
    tokens = np.array([[0, 3, 5, 1]])

    x = ad.embedding(params["wte"], tokens) + ad.embedding(params["wpe"], np.arange(4))
    causal = Tensor(np.where(np.triu(np.ones((4, 4), dtype=bool), k=1), -np.inf, 0.0), dtype=np.float64)
    x = transformer_block(params, x, 0, causal)
    x = transformer_block(params, x, 2, causal)
    reduced = ad.rms_norm(x, params["final_norm"]) @ params["w_out"]

    skipped = forward_logits(params, tokens, mask_from_indices([1], 3, border_b=1))
    np.testing.assert_allclose(skipped.data, reduced.data, atol=1e-6)


def test_different_masks_give_different_logits(tiny_params):
    a = forward_logits(tiny_params, PROMPT, mask_from_indices([1], 4, 1))
    b = forward_logits(tiny_params, PROMPT, mask_from_indices([2], 4, 1))
    assert not np.allclose(a.data, b.data)


def test_mask_length_mismatch(tiny_params):
    with pytest.raises(ConfigurationError):
        forward_logits(tiny_params, PROMPT, np.zeros(3))


def test_sequence_too_long(tiny_params):
    with pytest.raises(ConfigurationError):
        forward_logits(tiny_params, np.zeros(25, dtype=np.int64))


def test_token_out_of_vocabulary(tiny_params):
    seq = TokenSequence(prompt=PROMPT, completion=np.array([18]))
    with pytest.raises(TokenIndexError):
        sequence_logprob(tiny_params, seq)


def test_empty_completion_is_rejected(tiny_params):
    with pytest.raises(ContractError):
        sequence_logprob(tiny_params, TokenSequence(prompt=PROMPT, completion=np.array([], dtype=np.int64)))


def test_softmax_rows_are_normalized(tiny_params):
    probs = ad.softmax_array(forward_logits(tiny_params, PROMPT).data.astype(np.float64))
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


def test_sequence_probabilities_sum_to_one_over_all_completions():
    config = ModelConfig(num_layers=3, width=8, num_heads=2, vocab_size=4, max_sequence_length=6, precision=Precision.FLOAT64)
    params = init_params(config, stream(2, "init"))
    prompt = np.array([0, 1])
    total = sum(
        np.exp(sequence_logprob(params, TokenSequence(prompt=prompt, completion=np.array(c))))
        for c in itertools.product(range(4), repeat=2)
    )
    assert total == pytest.approx(1.0, abs=1e-6)


def test_uniform_policy_gives_log_one_eighth():
    config = ModelConfig(num_layers=3, width=2, num_heads=1, vocab_size=2, max_sequence_length=5, precision=Precision.FLOAT64)
    params = init_params(config, stream(0, "init"))
    params.tensors["w_out"].data[:] = 0.0
    seq = TokenSequence(prompt=np.array([0, 1]), completion=np.array([1, 0, 1]))
    assert sequence_logprob(params, seq) == pytest.approx(np.log(0.125))


def test_sequence_logprob_equals_incremental_next_token_sum(tiny_params):
    completion = np.array([3, 7, 0, 16])
    total = sequence_logprob(tiny_params, TokenSequence(prompt=PROMPT, completion=completion))
    stepwise = 0.0
    for i, token in enumerate(completion):
        prefix = np.concatenate([PROMPT, completion[:i]])
        logits = forward_logits(tiny_params, prefix).data[-1].astype(np.float64)
        stepwise += ad.log_softmax_array(logits)[token]
    assert total == pytest.approx(stepwise, abs=1e-5)
    assert total <= 0.0


def test_sampling_is_reproducible_and_fixed_length(tiny_params):
    first = sample_completion(tiny_params, PROMPT, None, 6, 1.0, 1.0, stream(9, "rollout", 0, 0))
    second = sample_completion(tiny_params, PROMPT, None, 6, 1.0, 1.0, stream(9, "rollout", 0, 0))
    assert first.completion_length == 6
    np.testing.assert_array_equal(first.completion, second.completion)
    np.testing.assert_array_equal(first.logprobs, second.logprobs)


def test_tiny_top_p_is_greedy(tiny_params):
    seq = sample_completion(tiny_params, PROMPT, None, 5, 1.0, 1e-9, stream(4, "rollout", 0, 0))
    tokens = PROMPT.copy()
    for token in seq.completion:
        assert token == int(np.argmax(forward_logits(tiny_params, tokens).data[-1]))
        tokens = np.append(tokens, token)
    np.testing.assert_allclose(seq.logprobs, 0.0, atol=1e-6)


def test_recorded_logprobs_match_rescoring(tiny_params):
    mask = mask_from_indices([2], 4, 1)
    seq = sample_completion(tiny_params, PROMPT, mask, 6, 1.0, 1.0, stream(5, "rollout", 0, 0))
    assert float(seq.logprobs.astype(np.float64).sum()) == pytest.approx(sequence_logprob(tiny_params, seq, mask), abs=1e-5)


def test_generate_logprobs_bitwise_equal_training_recompute(tiny_params):
    prompts = np.stack([PROMPT, PROMPT[::-1]])
    mask = mask_from_indices([1], 4, 1)
    rngs = [stream(6, "rollout", 1, i) for i in range(2)]
    completions, logprobs = generate(tiny_params, prompts, 3, mask, 8, 1.0, 1.0, rngs)
    recomputed = completion_token_logprobs(tiny_params, np.repeat(prompts, 3, axis=0), completions, mask)
    np.testing.assert_array_equal(logprobs, recomputed.data)


def test_generate_rows_are_independent_of_other_prompts(tiny_params):
    alone, _ = generate(tiny_params, PROMPT[None, :], 2, None, 5, 1.0, 1.0, [stream(8, "rollout", 0, 0)])
    together, _ = generate(
        tiny_params, np.stack([PROMPT, PROMPT]), 2, None, 5, 1.0, 1.0,
        [stream(8, "rollout", 0, 0), stream(8, "rollout", 0, 1)],
    )
    np.testing.assert_array_equal(alone, together[:2])


@pytest.mark.parametrize("temperature,top_p", [(0.0, 1.0), (1.0, 0.0), (1.0, 1.5)])
def test_generate_rejects_bad_decoding(tiny_params, temperature, top_p):
    with pytest.raises(ConfigurationError):
        generate(tiny_params, PROMPT[None, :], 1, None, 3, temperature, top_p, [stream(0, "rollout")])


def test_filtered_logprobs_renormalize_the_nucleus():
    logits = np.log(np.array([[0.5, 0.3, 0.15, 0.05]]))
    logp = filtered_logprobs(logits, 1.0, 0.7)
    assert np.isneginf(logp[0, 2]) and np.isneginf(logp[0, 3])
    np.testing.assert_allclose(np.exp(logp[0, :2]), [0.625, 0.375])


def test_temperature_sharpens():
    logits = np.array([[2.0, 1.0, 0.0]])
    cold = np.exp(filtered_logprobs(logits, 0.5, 1.0))
    warm = np.exp(filtered_logprobs(logits, 1.0, 1.0))
    assert cold[0, 0] > warm[0, 0]


def test_full_transformer_loss_gradient(tiny_params64):
    tokens = np.array([[12, 3, 10, 4]])
    name = "layers.1.wq"

    def loss(w: Tensor) -> Tensor:
        tensors = dict(tiny_params64.tensors)
        tensors[name] = w
        params = PolicyParams(config=tiny_params64.config, tensors=tensors)
        return -completion_token_logprobs(params, tokens[:, :2], tokens[:, 2:]).sum()

    assert gradient_error(loss, tiny_params64[name]) < 1e-3


def test_checkpoint_round_trip_is_bit_exact(tiny_params, tmp_path):
    tiny_params.step = 7
    path = save_checkpoint(tiny_params, tmp_path / "ckpt.npz")
    loaded = load_checkpoint(path)
    assert loaded.equals(tiny_params)
    assert loaded.step == 7
    assert loaded.config == tiny_params.config


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.npz")


def test_clone_is_independent(tiny_params):
    copy = tiny_params.clone()
    copy.tensors["w_out"].data[0, 0] += 1.0
    assert not copy.equals(tiny_params)
    assert tiny_params.all_finite()


def test_backward_reaches_every_unskipped_parameter(tiny_params):
    mask = mask_from_indices([2], 4, 1)
    for tensor in tiny_params.tensors.values():
        tensor.zero_grad()
    with Tape():
        loss = -completion_token_logprobs(tiny_params, PROMPT[None, :], np.array([[1, 2]]), mask).sum()
    ad.backward(loss)
    assert tiny_params["layers.2.wq"].grad is None
    assert tiny_params["layers.1.wq"].grad is not None
    assert tiny_params["w_out"].grad is not None
