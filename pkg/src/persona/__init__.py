"""On-device recommendation with cloud-generated, prototype-grouped parameter edits."""
from .config import RunConfig, load_config, parse_config
from .data import InteractionLog, MixtureSpec, gen_synthetic, load_csv, split_history_realtime
from .editor import EditSet, EditorNetwork, PrototypeModel, apply_edit, generate_edit, init_editor
from .harness import CloudServer, DeviceSession, run_simulation
from .metrics import MetricReport, auc, hr_at_k, ndcg_at_k
from .model import AdaptiveLayerSet, BackboneSpec, DeviceModel, init_device_model, score_items
from .prototypes import PartitionMap, PrototypeSet, dynamic_assign, kmeans

__version__ = "0.1.0"
