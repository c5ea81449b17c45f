"""Multi-modal prompt HOI detection at desk scale."""
