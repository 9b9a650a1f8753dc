"""
Library shared by the CLI subcommands: the tensor core, data ingestion, the model zoo, attack losses, the attack
engine and the experiment orchestration.
"""
