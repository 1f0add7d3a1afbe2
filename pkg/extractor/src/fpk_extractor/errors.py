"""Errors raised by the feature-pack extractor."""


class ExtractorError(Exception):
    """Base class for extraction failures."""


class MissingWeights(ExtractorError):
    """The selected encoder backend has no pretrained weights available."""


class ClassWithFewerThanNImages(ExtractorError):
    """A class folder holds fewer images than the requested shot count."""


class EmptyDataset(ExtractorError):
    """No class folders or no images were found under the dataset root."""
