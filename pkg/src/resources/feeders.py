from importlib import resources

from mcp.server.fastmcp import FastMCP

from src.tools.feeder import configured_feeder, serialize_feeder

_PLACEMENTS = {"default": "ieee123.placement", "ieee123": "ieee123.placement"}


def register_feeders(mcp: FastMCP) -> None:
    @mcp.resource("feeder://{name}")
    def feeder(name: str) -> str:
        if name in ("default", "green"):
            return serialize_feeder(configured_feeder(name))  # type: ignore[arg-type]
        if name == "ieee123":
            return serialize_feeder(configured_feeder("default"))
        raise ValueError(f"unknown feeder {name!r}")

    @mcp.resource("placement://{name}")
    def placement(name: str) -> str:
        filename = _PLACEMENTS.get(name)
        if filename is None:
            raise ValueError(f"unknown placement {name!r}")
        data = resources.files("src.resources").joinpath("data", filename)
        return data.read_text(encoding="utf-8")
