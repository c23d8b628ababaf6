from django.apps import AppConfig


class ClientDataConfig(AppConfig):
    name = "clientdata"
