"""
Views: thin, no business logic (HackSoft Django Styleguide).

Responsibility: validate input, call service, serialize output.
"""

from rest_framework import serializers
from rest_framework.response import Response
from rest_framework.views import APIView

from core.services import report, validate_scenario


class ReportApi(APIView):
    """GET /api/report/?scenario_id=s1_n3: DACS vs FLAT comparison row."""

    class InputSerializer(serializers.Serializer):
        scenario_id = serializers.CharField(required=True)

    class OutputSerializer(serializers.Serializer):
        scenario_id = serializers.CharField()
        dacs_n = serializers.IntegerField()
        flat_n = serializers.IntegerField()
        dacs_accuracy_mean = serializers.FloatField()
        dacs_accuracy_se = serializers.FloatField()
        flat_accuracy_mean = serializers.FloatField()
        flat_accuracy_se = serializers.FloatField()
        dacs_contamination_mean = serializers.FloatField()
        dacs_contamination_se = serializers.FloatField()
        flat_contamination_mean = serializers.FloatField()
        flat_contamination_se = serializers.FloatField()
        dacs_avg_context_tokens_mean = serializers.FloatField()
        dacs_avg_context_tokens_se = serializers.FloatField()
        flat_avg_context_tokens_mean = serializers.FloatField()
        flat_avg_context_tokens_se = serializers.FloatField()
        delta_accuracy = serializers.FloatField()
        efficiency_ratio = serializers.FloatField()
        welch_t = serializers.FloatField(allow_null=True)
        welch_df = serializers.FloatField(allow_null=True)
        welch_p = serializers.FloatField(allow_null=True)

    def get(self, request):
        input_ser = self.InputSerializer(data=request.query_params)
        input_ser.is_valid(raise_exception=True)

        result = report(**input_ser.validated_data)

        return Response(self.OutputSerializer(result.as_row()).data)


class ScenarioApi(APIView):
    """GET /api/scenarios/<scenario_id>/: scenario diagnostics."""

    class OutputSerializer(serializers.Serializer):
        scenario_id = serializers.CharField()
        n_agents = serializers.IntegerField()
        decisions_per_agent = serializers.DictField(child=serializers.IntegerField())
        mean_decisions = serializers.FloatField()
        n_interactions = serializers.IntegerField()
        disjoint = serializers.BooleanField()
        keyword_overlap = serializers.DictField(child=serializers.ListField(child=serializers.CharField()))
        registry_leaks = serializers.ListField(child=serializers.DictField())
        cross_mentions = serializers.ListField(child=serializers.DictField())

    def get(self, request, scenario_id: str):
        diagnostics = validate_scenario(scenario_id=scenario_id)

        return Response(self.OutputSerializer(diagnostics.as_dict()).data)
