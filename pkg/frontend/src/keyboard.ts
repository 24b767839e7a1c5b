// Keyboard contract: the whole correction loop is drivable without a
// pointer. T/N set labels (and advance), arrows navigate, [ ] adjust the
// heatmap opacity.

import { Label } from "./api.js";
import { ReviewViewModel } from "./state.js";

export type KeyAction =
  | { type: "label"; label: Label }
  | { type: "next" }
  | { type: "prev" }
  | { type: "opacity"; delta: number }
  | null;

export function actionForKey(key: string): KeyAction {
  switch (key) {
    case "t":
    case "T":
      return { type: "label", label: "Tumor" };
    case "n":
    case "N":
      return { type: "label", label: "Normal" };
    case "ArrowRight":
    case "ArrowDown":
      return { type: "next" };
    case "ArrowLeft":
    case "ArrowUp":
      return { type: "prev" };
    case "[":
      return { type: "opacity", delta: -0.1 };
    case "]":
      return { type: "opacity", delta: +0.1 };
    default:
      return null;
  }
}

export async function applyAction(vm: ReviewViewModel, action: KeyAction): Promise<void> {
  if (action === null) return;
  switch (action.type) {
    case "label":
      await vm.labelAndAdvance(action.label);
      break;
    case "next":
      vm.next();
      break;
    case "prev":
      vm.prev();
      break;
    case "opacity":
      vm.nudgeOpacity(action.delta);
      break;
  }
}
