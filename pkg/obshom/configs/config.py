import os
import json
import copy

config_dir = os.path.dirname(os.path.realpath(__file__))
defaults_path = os.path.join(config_dir, "defaults.json")


def singleton(cls):
    instances = {}

    def get_instance(*args, **kwargs):
        if cls not in instances:
            instances[cls] = cls(*args, **kwargs)
        return instances[cls]

    return get_instance


@singleton
class Config:
    def __init__(self):
        self.json_config = self.load_config_json()
        self.cpu_count = os.cpu_count() or 1
        self.solver = self.json_config["solver"]
        self.corrector = self.json_config["corrector"]
        self.experiment = self.json_config["experiment"]

    def load_config_json(self):
        with open(defaults_path, "r") as f:
            return json.load(f)

    def solver_defaults(self):
        return copy.deepcopy(self.solver)

    def cell_resolution(self, dim):
        return int(self.corrector["cell_resolution"][str(dim)])

    def resolve_threads(self, threads):
        """0 (or None) means every available core."""
        if not threads:
            return self.cpu_count
        return max(1, min(int(threads), self.cpu_count))
