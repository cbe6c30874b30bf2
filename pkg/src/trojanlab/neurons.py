"""Connection-strength neuron selection and perturbation-layer activation profiling.

Neuron indices are 0-based: text neurons occupy ``[0, D)`` and vision neurons
``[D, 2D)`` of the perturbation layer.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .model import VqaModel, activations


@dataclass(frozen=True)
class PerturbationNeurons:
    u_text: int
    u_vision: int
    sigma_all: np.ndarray

    def to_json(self) -> dict:
        return {
            "u_text": self.u_text,
            "u_vision": self.u_vision,
            "sigma": [float(s) for s in self.sigma_all],
        }

    @classmethod
    def from_json(cls, d: dict) -> "PerturbationNeurons":
        return cls(int(d["u_text"]), int(d["u_vision"]), np.asarray(d["sigma"], dtype=np.float64))


@dataclass
class ActivationProfile:
    mean_activation: np.ndarray
    side: int

    def grid(self) -> np.ndarray:
        """Square reshape for heatmaps, zero-padded when 2D is not a perfect square."""
        padded = np.zeros(self.side * self.side)
        padded[: self.mean_activation.size] = self.mean_activation
        return padded.reshape(self.side, self.side)


def connection_strength(model: VqaModel, absolute: bool = False) -> np.ndarray:
    """Row sums of the first weight matrix after the perturbation layer."""
    if not model.head:
        raise ValueError("model has no layer after the perturbation layer")
    w = model.head[0].weight
    return np.abs(w).sum(axis=1) if absolute else w.sum(axis=1)


def select_from_strength(sigma: np.ndarray) -> PerturbationNeurons:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 1 or sigma.size < 2 or sigma.size % 2:
        raise ValueError(f"connection strengths must have even length 2D >= 2, got {sigma.shape}")
    d = sigma.size // 2
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return PerturbationNeurons(int(np.argmax(sigma[:d])), d + int(np.argmax(sigma[d:])), sigma)


def select_perturbation_neurons(model: VqaModel, absolute: bool = False) -> PerturbationNeurons:
    return select_from_strength(connection_strength(model, absolute))


def profile_from_activations(acts: np.ndarray) -> ActivationProfile:
    acts = np.asarray(acts, dtype=np.float64)
    if acts.ndim != 2 or acts.shape[0] == 0:
        raise ValueError("activation profile needs a non-empty sample set")
    mean = acts.mean(axis=0)
    return ActivationProfile(mean, math.ceil(math.sqrt(mean.size)))


def profile_activations(model: VqaModel, images, questions) -> ActivationProfile:
    if len(images) == 0:
        raise ValueError("activation profile needs a non-empty sample set")
    return profile_from_activations(activations(model, np.asarray(images), np.asarray(questions)))


def write_profile_csv(profile: ActivationProfile, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["neuron_index", "mean_activation"])
        for i, a in enumerate(profile.mean_activation):
            w.writerow([i, f"{a:.10g}"])
