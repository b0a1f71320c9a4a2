__version__ = "0.1.0"

from .errors import DensecountError, DensecountWarning  # NOQA
from .numerics import *  # NOQA
from .model import *  # NOQA
from .groundtruth import *  # NOQA
from .dataio import *  # NOQA
from .curriculum import *  # NOQA
from .metrics import *  # NOQA
from .trainer import *  # NOQA
from .io import *  # NOQA
from .bench import *  # NOQA
