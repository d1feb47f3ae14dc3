"""Cross-view object correspondence toolkit (ego/exo object relating at desk scale)."""
