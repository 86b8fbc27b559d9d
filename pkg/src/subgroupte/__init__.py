"""SubgroupTE: treatment effect estimation with EM-trained subgroup identification."""

__version__ = "0.1.0"
