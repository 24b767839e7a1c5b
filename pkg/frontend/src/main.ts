import { ApiClient } from "./api.js";
import { actionForKey, applyAction } from "./keyboard.js";
import { ReviewViewModel } from "./state.js";
import { ReviewView } from "./view.js";

const api = new ApiClient();
const vm = new ReviewViewModel(api);
const root = document.getElementById("app");
if (root === null) throw new Error("missing #app element");
new ReviewView(root, vm, api);

window.addEventListener("keydown", (ev) => {
  if (ev.target instanceof HTMLInputElement || ev.target instanceof HTMLSelectElement) {
    return; // don't hijack typing in form controls
  }
  const action = actionForKey(ev.key);
  if (action !== null) {
    ev.preventDefault();
    void applyAction(vm, action);
  }
});

void vm.loadSlides();
