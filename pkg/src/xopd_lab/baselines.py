"""Comparison methods trained on the same alignment set as the main objective:

* SFT        - cross-entropy on the reference answers, speech-conditioned.
* Offline KD - SFT on answers greedily decoded by the text-only teacher.
* GKD        - full-vocabulary forward KL from the teacher (conditioned on
               text) to the student (conditioned on speech), evaluated on
               student-sampled trajectories.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import EOS, PairedExample
from .errors import ConfigurationError, DataError
from .rollout import TEXT, SPEECH, Trajectory


def sft_loss(student, example: PairedExample, modality: str = SPEECH) -> Tensor:
    """Mean per-token NLL of the reference answer; prompt tokens carry no loss."""
    from .model import Prompt

    if not example.reference_answer:
        raise DataError(f"example {example.example_id} has no reference answer")
    tokens = list(example.reference_answer) + [EOS]
    prompt_tokens = example.speech_prompt if modality == SPEECH else example.text_prompt
    logits = student.forward_logits(Prompt(modality, prompt_tokens), tokens)
    lp = ad.gather_log_prob(ad.log_softmax(logits), tokens)
    return ad.scale(ad.sum_all(lp), -1.0 / len(tokens))


def sft_batch_loss(student, examples: list[PairedExample], modality: str = SPEECH) -> Tensor:
    """Mean over examples of the per-example mean-NLL, in one batched pass."""
    from .model import Prompt, batched_completion_logps

    items = []
    weights = []
    for ex in examples:
        if not ex.reference_answer:
            raise DataError(f"example {ex.example_id} has no reference answer")
        tokens = list(ex.reference_answer) + [EOS]
        prompt_tokens = ex.speech_prompt if modality == SPEECH else ex.text_prompt
        items.append((Prompt(modality, prompt_tokens), tokens))
        weights.append(np.full(len(tokens), -1.0 / (len(tokens) * len(examples))))
    lp, _ = batched_completion_logps(student, items)
    return ad.sum_all(ad.mul(lp, Tensor(np.concatenate(weights))))


def offline_kd_build(
    teacher, examples: list[PairedExample], max_new: int = 16, teacher_checkpoint: str = ""
) -> tuple[list[PairedExample], dict]:
    """Distill: pair each speech prompt with the teacher's greedy text answer."""
    from .model import Prompt, greedy_decode_batch

    prompts = [Prompt(TEXT, ex.text_prompt) for ex in examples]
    answers = greedy_decode_batch(teacher, prompts, max_new=max_new)
    distilled = []
    for ex, ans in zip(examples, answers):
        distilled.append(
            PairedExample(
                example_id=ex.example_id,
                family=ex.family,
                difficulty=ex.difficulty,
                text_prompt=list(ex.text_prompt),
                speech_prompt=list(ex.speech_prompt),
                reference_answer=list(ans),
                label=ex.label,
                round_trip_error_rate=ex.round_trip_error_rate,
            )
        )
    provenance = {"method": "offline_kd", "decode_mode": "greedy", "teacher_checkpoint": teacher_checkpoint}
    return distilled, provenance


def gkd_loss(teacher, student, traj: Trajectory, example: PairedExample) -> Tensor:
    """Mean per-position forward KL(teacher(.|T, y_<t) || student(.|S, y_<t)).

    Differentiates through the student distribution only; the trajectory
    must be student-sampled on the speech prompt.
    """
    from .model import Prompt

    if teacher.cfg.text_vocab_size != student.cfg.text_vocab_size:
        raise ConfigurationError("teacher/student vocab mismatch")
    if traj.conditioning_modality != SPEECH:
        raise DataError("GKD expects a SPEECH-conditioned trajectory")
    with ad.no_grad():
        t_logits = teacher.forward_logits(Prompt(TEXT, example.text_prompt), traj.tokens)
        t_logp = ad.log_softmax(t_logits).data
    p = np.exp(t_logp)
    s_logp = ad.log_softmax(student.forward_logits(Prompt(SPEECH, example.speech_prompt), traj.tokens))
    neg_entropy = float((p * t_logp).sum())
    cross = ad.sum_all(ad.mul(Tensor(p), s_logp))
    L = len(traj.tokens)
    return ad.scale(ad.sub(Tensor(np.asarray(neg_entropy)), cross), 1.0 / L)


def gkd_batch_loss(
    teacher, student, pairs: list[tuple[Trajectory, PairedExample]]
) -> Tensor:
    """Mean over pairs of the per-pair mean forward KL, in batched passes.

    Each pair holds a student-sampled SPEECH trajectory and its example;
    only the student distribution carries gradient.
    """
    from .model import Prompt, backbone_logits
    from . import model as model_mod

    if not pairs:
        raise DataError("gkd_batch_loss given no trajectories")
    if teacher.cfg.text_vocab_size != student.cfg.text_vocab_size:
        raise ConfigurationError("teacher/student vocab mismatch")
    t_embs, s_embs, t_seps, s_seps = [], [], [], []
    for traj, ex in pairs:
        if traj.conditioning_modality != SPEECH:
            raise DataError("GKD expects SPEECH-conditioned trajectories")
        te, t_sep = teacher.embed_sequence(Prompt(TEXT, ex.text_prompt), traj.tokens)
        se, s_sep = student.embed_sequence(Prompt(SPEECH, ex.speech_prompt), traj.tokens)
        t_embs.append(Tensor(te.data))
        s_embs.append(se)
        t_seps.append(t_sep)
        s_seps.append(s_sep)
    with ad.no_grad():
        t_logits = backbone_logits(teacher.params, teacher.cfg, ad.stack_pad(t_embs))
        t_logp = ad.log_softmax(t_logits).data
    s_logp = ad.log_softmax(backbone_logits(student.params, student.cfg, ad.stack_pad(s_embs)))
    p = np.exp(t_logp)
    # Teacher and student sequences place the completion at different
    # offsets; map the teacher rows into the student's coordinate frame.
    coeff = np.zeros(s_logp.data.shape)
    neg_entropy = 0.0
    for i, (traj, _) in enumerate(pairs):
        w = 1.0 / (len(traj.tokens) * len(pairs))
        t_rows = slice(t_seps[i], t_seps[i] + len(traj.tokens))
        s_rows = slice(s_seps[i], s_seps[i] + len(traj.tokens))
        coeff[i, s_rows] = w * p[i, t_rows]
        neg_entropy += float(w * (p[i, t_rows] * t_logp[i, t_rows]).sum())
    cross = ad.sum_all(ad.mul(Tensor(coeff), s_logp))
    return ad.sub(Tensor(np.asarray(neg_entropy)), cross)
