"""Reference denoiser server speaking the NDJSON prediction protocol.

Any model that maps (tokens with -1 masks, time) to per-masked-position
distributions can stand behind the same interface; a table-lookup demo
model ships with the package.
"""

from .model import TableLookupModel, load_model
from .server import handle_line, serve_stdio, serve_tcp

__version__ = "0.1.0"
