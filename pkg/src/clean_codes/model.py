"""
The assembled network: backbone, codebook, code predictor, fusion and CTC head,
with one loss method per training stage.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .asr_eval import Hypothesis, batch_ctc_loss, greedy_decode
from .backbone import (EncoderConfig, EW2Backbone, WaveFeatures, consistency_loss, contrastive_loss,
                       diversity_loss, ew2_loss, feature_penalty, sample_mask)
from .codebook import Codebook, CodeSequence, codebook_quantize_loss
from .config import CleanCodesConfig
from .corpus import derive_seed
from .data import Batch
from .errors import InvalidStateError
from .iffnet import IFFConfig, build_fusion
from .predictor import (PredictedCodes, PredictorConfig, build_predictor, finetune_loss, gumbel_select,
                        pred_loss, predict_codes, res_loss, retrieve)
from .vocab import Vocab

logger = logging.getLogger(__name__)

FeatureTransform = Callable[[WaveFeatures], WaveFeatures]


@dataclass
class FinetuneOutput:
    loss: torch.Tensor
    ctc: torch.Tensor
    pred: Optional[torch.Tensor]
    res: Optional[torch.Tensor]
    log_probs: torch.Tensor
    frame_lengths: torch.Tensor
    predicted_ids: Optional[torch.Tensor] = None
    truth_ids: Optional[torch.Tensor] = None

    def stats(self) -> Dict[str, float]:
        values = {"loss": float(self.loss), "ctc": float(self.ctc)}
        if self.pred is not None:
            values["pred"] = float(self.pred)
            values["res"] = float(self.res)
        return values


@dataclass
class Transcription:
    hypotheses: List[Hypothesis]
    predicted_codes: Optional[torch.Tensor] = None
    frame_lengths: Optional[torch.Tensor] = None
    extras: Dict[str, Any] = field(default_factory=dict)


class CleanCodesModel(nn.Module):
    """Noise-robust ASR model built around a clean-speech codebook prior."""

    def __init__(self, encoder_config: EncoderConfig, codebook_config: Dict[str, Any],
                 predictor_config: PredictorConfig, iff_config: IFFConfig,
                 fusion_kind: str = "iffnet", vocab: Optional[Vocab] = None):
        super().__init__()
        self.encoder_config = encoder_config
        self.codebook_config = dict(codebook_config)
        self.predictor_config = predictor_config
        self.fusion_kind = fusion_kind
        self.vocab = vocab or Vocab()
        self.logger = logging.getLogger(__name__)

        dim = encoder_config.embed_dim
        self.backbone = EW2Backbone(encoder_config)
        self.codebook: Optional[Codebook] = None
        self.predictor: Optional[nn.Module] = None
        self.fusion: Optional[nn.Module] = None
        if self.codebook_enabled:
            self.codebook = Codebook(int(codebook_config.get("num_entries", 64)), dim,
                                     int(codebook_config.get("dead_code_epochs", 2)))
            self.predictor = build_predictor(predictor_config, dim, self.codebook)
            self.fusion = build_fusion(fusion_kind, dim, iff_config)
        self.ctc_head = nn.Linear(dim, len(self.vocab))

    @classmethod
    def from_config(cls, config: CleanCodesConfig) -> "CleanCodesModel":
        return cls(
            encoder_config=config.get_encoder_config(),
            codebook_config=config.get_codebook_config(),
            predictor_config=config.get_predictor_config(),
            iff_config=config.get_iffnet_config(),
            fusion_kind=config.get_fusion_kind(),
        )

    @property
    def codebook_enabled(self) -> bool:
        return bool(self.codebook_config.get("enabled", True))

    def _require_codebook(self) -> Codebook:
        if self.codebook is None:
            raise InvalidStateError("Model was built with the codebook disabled")
        return self.codebook

    # Backbone pre-training

    def pretrain_backbone_loss(self, batch: Batch, seed: int,
                               generator: Optional[torch.Generator] = None):
        """Contrastive + diversity + feature + consistency loss on a paired batch."""
        cfg = self.encoder_config
        f_n = self.backbone.encode_features(batch.noisy, batch.lengths)
        f_c = self.backbone.encode_features(batch.clean, batch.lengths)
        valid = ~f_n.padding_mask

        time_mask = torch.zeros_like(valid)
        for i, n_frames in enumerate(f_n.lengths.tolist()):
            plan = sample_mask(n_frames, cfg.mask_prob, cfg.mask_span, derive_seed(seed, i), min_spans=1)
            time_mask[i, :n_frames] = plan.to_tensor(n_frames)

        z = self.backbone.contextualize(f_n, time_mask)
        targets = self.backbone.quantize_targets(f_c, time_mask, generator=generator)

        frame_losses = []
        batch_index = targets.frame_index_map[:, 0]
        for i in range(len(batch)):
            rows = (batch_index == i).nonzero().flatten()
            if len(rows) < 2:
                continue
            frames = targets.frame_index_map[rows, 1]
            k = min(cfg.num_distractors, len(rows) - 1)
            utterance_loss = contrastive_loss(z.values[i, frames], targets.values[rows], k,
                                              cfg.logit_temp, derive_seed(seed, i, 1))
            frame_losses.append((utterance_loss * len(rows), len(rows)))
        if not frame_losses:
            raise InvalidStateError("No utterance in the batch has two masked frames")
        # mean over every scored masked frame of the batch
        l_m = torch.stack([total for total, _ in frame_losses]).sum() / sum(n for _, n in frame_losses)
        l_d = diversity_loss(targets.soft_probs)
        l_f = feature_penalty(f_n.activations[valid])
        l_c = consistency_loss(f_n.values, f_c.values, valid)
        loss = ew2_loss(l_m, l_d, l_f, l_c, cfg.alpha, cfg.beta, cfg.gamma)
        stats = {
            "loss": float(loss), "contrastive": float(l_m), "diversity": float(l_d),
            "feature": float(l_f), "consistency": float(l_c),
            "code_perplexity": float(targets.code_perplexity),
        }
        return loss, stats

    # Codebook pre-training

    def clean_representation(self, batch: Batch):
        return self.backbone.represent(batch.clean, batch.lengths)

    def pretrain_codebook_loss(self, batch: Batch):
        codebook = self._require_codebook()
        z_c = self.clean_representation(batch)
        valid = ~z_c.padding_mask
        loss, codes = codebook_quantize_loss(codebook, z_c.values[valid],
                                             float(self.codebook_config.get("beta_commit", 0.25)))
        return loss, {"loss": float(loss), "perplexity": codebook.perplexity(codes)}, z_c.values[valid]

    @torch.no_grad()
    def truth_codes(self, batch: Batch) -> torch.Tensor:
        """(B, T) nearest-entry ids of the clean representations."""
        codebook = self._require_codebook()
        return codebook.nn_lookup(self.clean_representation(batch).values).ids

    # Finetuning

    def select_codes(self, logits: torch.Tensor, generator: Optional[torch.Generator] = None) -> PredictedCodes:
        if self.training and self.predictor_config.kind != "nn_matching":
            return gumbel_select(logits, self.predictor_config.tau, self.predictor_config.hard_select,
                                 generator=generator)
        ids = logits.argmax(dim=-1)
        return PredictedCodes(ids=ids, one_hot_st=F.one_hot(ids, logits.shape[-1]).to(logits.dtype))

    def finetune_forward(self, batch: Batch, generator: Optional[torch.Generator] = None,
                         truth_ids: Optional[torch.Tensor] = None,
                         augment: Optional[FeatureTransform] = None) -> FinetuneOutput:
        features = self.backbone.encode_features(batch.noisy, batch.lengths)
        if augment is not None:
            features = augment(features)
        z_n = self.backbone.contextualize(features)
        valid = ~z_n.padding_mask

        if not self.codebook_enabled:
            log_probs = F.log_softmax(self.ctc_head(z_n.values), dim=-1)
            ctc = batch_ctc_loss(log_probs, z_n.lengths, batch.targets, self.vocab.blank_id)
            return FinetuneOutput(loss=ctc, ctc=ctc, pred=None, res=None,
                                  log_probs=log_probs, frame_lengths=z_n.lengths)

        codebook = self._require_codebook()
        with torch.no_grad():
            z_c = self.clean_representation(batch).values
        if truth_ids is None:
            truth_ids = codebook.nn_lookup(z_c).ids

        code_logits = predict_codes(self.predictor, z_n.values, z_n.lengths)
        codes = self.select_codes(code_logits.logits, generator)
        z_q = retrieve(codes, codebook)
        z_f = self.fusion(z_n.values, z_q.values, z_n.padding_mask)
        log_probs = F.log_softmax(self.ctc_head(z_f), dim=-1)

        ctc = batch_ctc_loss(log_probs, z_n.lengths, batch.targets, self.vocab.blank_id)
        l_pred = pred_loss(code_logits, CodeSequence(truth_ids, codebook.num_entries), valid)
        l_res = res_loss(z_q, z_c, valid)
        loss = finetune_loss(ctc, l_pred, l_res, self.predictor_config.lambda_pred,
                             self.predictor_config.lambda_res)
        return FinetuneOutput(loss=loss, ctc=ctc, pred=l_pred, res=l_res, log_probs=log_probs,
                              frame_lengths=z_n.lengths, predicted_ids=codes.ids, truth_ids=truth_ids)

    @torch.no_grad()
    def representations(self, batch: Batch) -> Dict[str, torch.Tensor]:
        """Deterministic Z_n / Z_c (and Z_q / Z_f with code ids when a codebook exists)."""
        was_training = self.training
        self.eval()
        try:
            z_n = self.backbone.represent(batch.noisy, batch.lengths)
            z_c = self.clean_representation(batch)
            out = {"Z_n": z_n.values, "Z_c": z_c.values, "frame_lengths": z_n.lengths}
            if self.codebook is not None:
                code_logits = predict_codes(self.predictor, z_n.values, z_n.lengths)
                codes = self.select_codes(code_logits.logits)
                z_q = retrieve(codes, self.codebook).values
                out.update({
                    "Z_q": z_q,
                    "Z_f": self.fusion(z_n.values, z_q, z_n.padding_mask),
                    "Z_q_ids": codes.ids,
                    "Z_c_ids": self.codebook.nn_lookup(z_c.values).ids,
                })
        finally:
            self.train(was_training)
        return out

    @torch.no_grad()
    def transcribe(self, batch: Batch) -> Transcription:
        """Greedy transcription of the noisy side of a batch."""
        was_training = self.training
        self.eval()
        try:
            output = self.finetune_forward(batch)
        finally:
            self.train(was_training)
        hypotheses = [
            greedy_decode(output.log_probs[i, :n], self.vocab)
            for i, n in enumerate(output.frame_lengths.tolist())
        ]
        return Transcription(hypotheses=hypotheses, predicted_codes=output.predicted_ids,
                             frame_lengths=output.frame_lengths,
                             extras={"truth_codes": output.truth_ids})
