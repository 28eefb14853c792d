"""
LangGraph workflow for the classification path.
"""

from src.guard.workflow.workflow import ClassificationState, create_classification_workflow
