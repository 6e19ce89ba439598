import json
import os
import signal
import subprocess
import sys
import time

import pytest

from conftest import ADMIN_CREDS, WORKER_CREDS, free_port


def run_cli(*argv, env=None, timeout=90):
    full_env = dict(os.environ)
    if env:
        full_env.update(env)
    return subprocess.run(
        [sys.executable, "-m", "tuhr.cli", *argv],
        capture_output=True, text=True, timeout=timeout, env=full_env,
    )


class ServeProc:
    def __init__(self, tmp_path, *extra_args, env=None, data_dir=None):
        self.data_dir = str(data_dir or tmp_path / "data")
        self.telemetry_port = free_port()
        self.api_port = free_port()
        self.stdout_path = tmp_path / f"serve-{self.api_port}.log"
        creds = tmp_path / "credentials.json"
        if not creds.exists():
            creds.write_text(json.dumps([ADMIN_CREDS, WORKER_CREDS]))
        self.stdout_file = open(self.stdout_path, "w")
        full_env = dict(os.environ)
        if env:
            full_env.update(env)
        args = [
            sys.executable, "-m", "tuhr.cli", "serve",
            "--data-dir", self.data_dir,
            "--host", "127.0.0.1",
            "--telemetry-port", str(self.telemetry_port),
            "--api-port", str(self.api_port),
            "--credentials-file", str(creds),
            "--offline-timeout", "0",
            *extra_args,
        ]
        self.proc = subprocess.Popen(args, stdout=self.stdout_file,
                                     stderr=subprocess.STDOUT, env=full_env)

    def wait_ready(self, timeout=15):
        deadline = time.time() + timeout
        while time.time() < deadline:
            text = self.stdout_path.read_text()
            if "tuhr serve:" in text and "recovered_offset=" in text:
                return text
            if self.proc.poll() is not None:
                raise RuntimeError(f"serve died: {text}")
            time.sleep(0.05)
        raise TimeoutError(f"serve not ready: {self.stdout_path.read_text()}")

    @property
    def telemetry_addr(self):
        return f"127.0.0.1:{self.telemetry_port}"

    @property
    def api_addr(self):
        return f"127.0.0.1:{self.api_port}"

    def terminate(self, timeout=10):
        if self.proc.poll() is None:
            self.proc.send_signal(signal.SIGTERM)
        code = self.proc.wait(timeout=timeout)
        self.stdout_file.close()
        return code

    def kill(self):
        if self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait(timeout=10)
        self.stdout_file.close()


SIM_AUTH = ["--admin-user", ADMIN_CREDS["username"],
            "--admin-password", ADMIN_CREDS["password"]]


@pytest.fixture
def serve(tmp_path):
    procs = []

    def start(*extra_args, env=None, data_dir=None):
        p = ServeProc(tmp_path, *extra_args, env=env, data_dir=data_dir)
        procs.append(p)
        p.wait_ready()
        return p

    yield start
    for p in procs:
        p.kill()


class TestServe:
    def test_fresh_start_and_clean_shutdown(self, tmp_path, serve):
        p = serve()
        banner = p.wait_ready()
        assert "recovered_offset=none" in banner
        assert f"telemetry=:{p.telemetry_port}" in banner
        assert p.terminate() == 0
        # clean shutdown leaves a snapshot once there are events; here just the log
        assert (tmp_path / "data").exists()

    def test_port_conflict_exits_one_naming_port(self, tmp_path, serve):
        p = serve()
        result = run_cli(
            "serve", "--data-dir", str(tmp_path / "other"),
            "--host", "127.0.0.1",
            "--telemetry-port", str(p.telemetry_port),
            "--api-port", str(free_port()),
        )
        assert result.returncode == 1
        assert str(p.telemetry_port) in result.stderr

    def test_flag_beats_environment(self, tmp_path):
        flag_port = free_port()
        env_port = free_port()
        p = ServeProc(tmp_path, env={"TUHR_API_PORT": str(env_port)})
        try:
            banner = p.wait_ready()
            assert f"api=:{p.api_port}" in banner  # flag value, not env
        finally:
            p.kill()

    def test_environment_beats_config_file(self, tmp_path):
        env_dir = tmp_path / "env-data"
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"data_dir": str(tmp_path / "file-data")}))
        result_port_t = free_port()
        result_port_a = free_port()
        proc = subprocess.Popen(
            [sys.executable, "-m", "tuhr.cli", "--config", str(config), "serve",
             "--host", "127.0.0.1",
             "--telemetry-port", str(result_port_t), "--api-port", str(result_port_a),
             "--offline-timeout", "0"],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True,
            env={**os.environ, "TUHR_DATA_DIR": str(env_dir)},
        )
        try:
            deadline = time.time() + 15
            banner = ""
            while time.time() < deadline and "tuhr serve:" not in banner:
                banner += proc.stdout.readline()
            assert str(env_dir) in banner
        finally:
            proc.kill()
            proc.wait()


class TestSimulateAndReports:
    def test_fig4_then_report(self, tmp_path, serve):
        p = serve()
        result = run_cli("simulate", "--scenario", "fig4_levels",
                         "--server", p.telemetry_addr, "--api", p.api_addr, *SIM_AUTH)
        assert result.returncode == 0, result.stderr
        assert "6 sent, 6 ok" in result.stdout
        assert p.terminate() == 0

        report = run_cli("report", "--data-dir", p.data_dir)
        assert report.returncode == 0
        assert "z-demo" in report.stdout

        records = run_cli("report", "--data-dir", p.data_dir, "--format", "records")
        assert records.returncode == 0
        zone_line = next(l for l in records.stdout.splitlines() if l.startswith("zone "))
        assert "empty=1" in zone_line
        assert "almost_full=1" in zone_line
        assert "full=1" in zone_line

    def test_simulate_records_format(self, tmp_path, serve):
        p = serve()
        result = run_cli("simulate", "--scenario", "fig4_levels",
                         "--server", p.telemetry_addr, "--api", p.api_addr,
                         "--format", "records", *SIM_AUTH)
        assert result.returncode == 0, result.stderr
        lines = result.stdout.splitlines()
        assert lines[0].startswith("sim scenario=fig4_levels")
        assert "sent=6 ok=6 dup=0 err=0 lost=0" in lines[0]
        fills = [l for l in lines if l.startswith("sim_fill ")]
        assert len(fills) == 3

    def test_simulate_unknown_scenario(self, tmp_path, serve):
        p = serve()
        result = run_cli("simulate", "--scenario", "nope",
                         "--server", p.telemetry_addr, "--api", p.api_addr, *SIM_AUTH)
        assert result.returncode == 1
        assert "nope" in result.stderr

    def test_simulate_connection_refused(self, tmp_path):
        result = run_cli("simulate", "--scenario", "fig4_levels",
                         "--server", f"127.0.0.1:{free_port()}",
                         "--api", f"127.0.0.1:{free_port()}", *SIM_AUTH)
        assert result.returncode == 1

    def test_replay_twice_identical(self, tmp_path, serve):
        p = serve()
        run_cli("simulate", "--scenario", "fig4_levels",
                "--server", p.telemetry_addr, "--api", p.api_addr, *SIM_AUTH)
        p.terminate()
        first = run_cli("replay", "--data-dir", p.data_dir, "--format", "records")
        second = run_cli("replay", "--data-dir", p.data_dir, "--format", "records")
        assert first.returncode == second.returncode == 0
        assert first.stdout == second.stdout
        assert "hash=" in first.stdout

    def test_plan_no_full_bins(self, tmp_path, serve):
        p = serve()
        run_cli("simulate", "--scenario", "gas_fire",
                "--server", p.telemetry_addr, "--api", p.api_addr, *SIM_AUTH)
        p.terminate()
        result = run_cli("plan", "--data-dir", p.data_dir)
        assert result.returncode == 0
        assert "0 routes" in result.stdout

    def test_plan_routes_full_bin_to_worker(self, tmp_path, serve):
        p = serve()
        run_cli("simulate", "--scenario", "fig4_levels",
                "--server", p.telemetry_addr, "--api", p.api_addr, *SIM_AUTH)
        p.terminate()
        result = run_cli("plan", "--data-dir", p.data_dir, "--format", "records")
        assert result.returncode == 0
        assert "plan id=" in result.stdout
        assert "route worker=w-1 stops=b-3" in result.stdout

    def test_replay_without_log(self, tmp_path):
        result = run_cli("replay", "--data-dir", str(tmp_path / "nothing"))
        assert result.returncode == 1


class TestRecovery:
    def test_kill_then_restart_recovers(self, tmp_path, serve):
        p = serve()
        run_cli("simulate", "--scenario", "fig4_levels",
                "--server", p.telemetry_addr, "--api", p.api_addr, *SIM_AUTH)
        replay_before = run_cli("replay", "--data-dir", p.data_dir, "--format", "records")
        p.kill()  # no snapshot, no clean shutdown

        p2 = serve(data_dir=p.data_dir)
        banner = p2.wait_ready()
        assert "recovered_offset=none" not in banner
        replay_after = run_cli("replay", "--data-dir", p2.data_dir, "--format", "records")
        assert replay_before.stdout == replay_after.stdout
        assert p2.terminate() == 0

    def test_serve_kill_serve_hash_stable(self, tmp_path, serve):
        # recovery is idempotent: a second recovered run at the same offset
        # reports the same state hash
        p = serve()
        run_cli("simulate", "--scenario", "fig4_levels",
                "--server", p.telemetry_addr, "--api", p.api_addr, *SIM_AUTH)
        p.kill()
        hashes = []
        for _ in range(2):
            p2 = serve(data_dir=p.data_dir)
            res = run_cli("replay", "--data-dir", p2.data_dir, "--format", "records")
            hashes.append(res.stdout)
            p2.kill()
        assert hashes[0] == hashes[1]
