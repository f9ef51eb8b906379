"""Exporter failure types."""


class ExporterError(Exception):
    """Base class for exporter failures."""


class BackboneUnavailable(ExporterError):
    pass


class ImageDecodeError(ExporterError):
    pass


class LayoutError(ExporterError):
    pass
