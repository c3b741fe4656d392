"""Per-channel gate statistics and which input signal each channel follows.

A channel's sensitivity to a signal is the mean absolute change of its
pooled activation when that signal is removed from the input. The
benchmark images are sums of noise, distractors, the causal dots and the
colour cast, so both removals are exact.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from hcd import synthbench
from hcd.synthbench import SynthDataset


@dataclass
class ChannelReport:
    mask_mean: np.ndarray
    mask_std: np.ndarray
    cue_sensitivity: np.ndarray
    causal_sensitivity: np.ndarray

    @property
    def cue_dominant(self) -> np.ndarray:
        return self.cue_sensitivity > self.causal_sensitivity

    def group_means(self) -> dict:
        """Mean mask over cue-dominant and causal-dominant channels (NaN if a group is empty)."""
        cue = self.cue_dominant
        mean = lambda sel: float(self.mask_mean[sel].mean()) if sel.any() else float("nan")  # noqa: E731
        return {"cue_channels": int(cue.sum()), "causal_channels": int((~cue).sum()),
                "mask_cue": mean(cue), "mask_causal": mean(~cue)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("channel,mask_mean,mask_std,cue_sensitivity,causal_sensitivity,dominant\n")
        for c in range(len(self.mask_mean)):
            dom = "cue" if self.cue_dominant[c] else "causal"
            buf.write(f"{c},{self.mask_mean[c]:.6f},{self.mask_std[c]:.6f},"
                      f"{self.cue_sensitivity[c]:.6f},{self.causal_sensitivity[c]:.6f},{dom}\n")
        return buf.getvalue()


def ablated_inputs(data: SynthDataset):
    """``(without_cue, without_causal)`` copies of ``data.images``."""
    spec = data.spec
    cue = np.stack([synthbench.cue(spec, int(d)) for d in data.d])
    no_cue = data.images - cue[:, :, None, None]
    no_causal = data.images - spec.causal_strength * data.causal_mask[:, None].astype(np.float64)
    return no_cue, no_causal


def _latent(model, images: np.ndarray, batch_size: int) -> np.ndarray:
    return np.concatenate([model.latent(images[i:i + batch_size])
                           for i in range(0, len(images), batch_size)])


def channel_report(model, data: SynthDataset, batch_size: int = 256) -> ChannelReport:
    if model.gate is None:
        raise ValueError("model has no channel gate")
    masks = np.concatenate([model.predict_batch(data.images[i:i + batch_size]).mask
                            for i in range(0, len(data), batch_size)])
    z = _latent(model, data.images, batch_size)
    no_cue, no_causal = ablated_inputs(data)
    cue_s = np.abs(z - _latent(model, no_cue, batch_size)).mean(axis=0)
    causal_s = np.abs(z - _latent(model, no_causal, batch_size)).mean(axis=0)
    return ChannelReport(masks.mean(axis=0), masks.std(axis=0), cue_s, causal_s)
