"""Exception types shared across the package."""


class Distill3DError(Exception):
    """Base class for all package errors."""


class ConfigError(Distill3DError):
    """Invalid or inconsistent configuration / CLI input."""


class DegenerateGeometryError(Distill3DError):
    """Surface extraction produced an empty or unusable mesh."""


class NoSurfaceError(Distill3DError):
    """Density-to-SDF conversion found no iso crossing."""


class StaleStateError(Distill3DError):
    """A backward pass was invoked with state that no longer matches its forward."""


class BridgeError(Distill3DError):
    """Base class for denoiser bridge failures."""


class BridgeTransportError(BridgeError):
    """Could not reach the remote endpoint (connection, timeout, DNS)."""


class BridgeProtocolError(BridgeError):
    """The remote endpoint answered, but not in the bridge wire format."""
