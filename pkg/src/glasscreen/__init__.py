"""Composition screening toolkit: a self-supervised contrastive encoder over
glass compositions plus the data pipeline, metrics, KNN baseline and CLI to
rank candidates by the likelihood that Tg falls in a target band."""

__version__ = "0.1.0"
