"""Facade, deployments, connectors and chaining."""

from .chain import (ChainManifest, StageSpec, StageStatus, Trigger, load_chain_manifest,
                    run_chain)
from .connectors import (END, Connector, ConnectorRecord, FileHandoffConnector, InProcessQueue,
                         make_connector)
from .deploy import BaseDeploy, FilterDeploy, StorageSink, plugin_state_key
from .facade import EdnaML, TrainResult, deploy, load_components, train, warmup_plugins
from .pipeline import Components, DataBundle, PipelinePlan, apply

__all__ = [
    "END", "BaseDeploy", "ChainManifest", "Components", "Connector", "ConnectorRecord",
    "DataBundle", "EdnaML", "FileHandoffConnector", "FilterDeploy", "InProcessQueue",
    "PipelinePlan", "StageSpec", "StageStatus", "StorageSink", "TrainResult", "Trigger",
    "apply", "deploy", "load_chain_manifest", "load_components", "make_connector",
    "plugin_state_key", "run_chain", "train", "warmup_plugins",
]
