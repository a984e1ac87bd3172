from django.urls import path

from core.views import ReportApi, ScenarioApi

app_name = "core"

urlpatterns = [
    path("report/", ReportApi.as_view(), name="report"),
    path("scenarios/<slug:scenario_id>/", ScenarioApi.as_view(), name="scenario-detail"),
]
