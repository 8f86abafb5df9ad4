"""masked-dpsgd package."""
