import { RsuClient } from "./api.js";
import { createConsole } from "./app.js";

const mount = document.getElementById("app");
if (mount) {
  // Served statically by the RSU itself, so the API lives at the same origin.
  createConsole(mount, new RsuClient(""));
}
